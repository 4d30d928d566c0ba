"""Smoke test for the Python bindings.

Trains the one-concept memorization config with the CLI, loads the
checkpoint through `semapix_py` and checks that generation is deterministic
and reads back as the prompt.

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o /tmp/wheels
    pip install /tmp/wheels/semapix_py-*.whl
    cargo build --release -p semapix-cli
    python python/smoke_test.py
"""

import os
import subprocess
import sys
import tempfile
from pathlib import Path

import semapix_py

ROOT = Path(__file__).resolve().parent.parent


def cli() -> Path:
    for profile in ("release", "debug"):
        exe = ROOT / "target" / profile / "semapix"
        if exe.exists():
            return exe
    sys.exit("build the CLI first: cargo build --release -p semapix-cli")


def main() -> None:
    assert semapix_py.parse_prompt("red square top-left") == ("red", "square", "top-left")
    try:
        semapix_py.parse_prompt("red blob")
    except ValueError as e:
        assert "shape" in str(e), e
    else:
        raise AssertionError("malformed prompt accepted")

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "mem"
        subprocess.run(
            [str(cli()), "train", "--config", str(ROOT / "configs" / "memorize.toml"), "--out", str(out)],
            check=True,
            env={k: v for k, v in os.environ.items() if k != "SEMAPIX_OUT"},
        )
        model = semapix_py.Model.load(str(out / "memorize.ckpt"))
        text, sem, pix, total = model.vocab()
        assert total == text + 5 + sem + pix

        a = model.generate("red square top-left")
        b = model.generate("red square top-left")
        assert a["match"], a["oracle"]
        assert a["sem_ids"] == b["sem_ids"] and a["pix_ids"] == b["pix_ids"]
        assert a["ppm"].startswith(b"P6\n24 24\n255\n")

        report = model.evaluate(samples=8)
        for key in ("gen_accuracy", "und_accuracy", "edit_accuracy", "harmonic_und"):
            assert 0.0 <= report[key] <= 1.0, (key, report[key])

        try:
            semapix_py.Model.load(str(Path(tmp) / "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
