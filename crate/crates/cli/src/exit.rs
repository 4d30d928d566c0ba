use std::fmt;

/// An error with the process exit code it maps to.
pub struct Exit {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Debug for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Code for a library error that reached the top without a call-site code:
/// configuration 2, numeric or freeze failures 3, grammar 5, anything else 1.
fn default_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<semapix::Error>() {
            return match err {
                semapix::Error::Config(_) => 2,
                semapix::Error::Numeric(_) | semapix::Error::FrozenDrift(_) => 3,
                semapix::Error::Grammar { .. } => 5,
                _ => 1,
            };
        }
    }
    1
}

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        let error = e.into();
        Self {
            code: default_code(&error),
            error,
        }
    }
}

pub trait WithCode<T> {
    fn code(self, code: u8) -> Result<T, Exit>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Exit> {
        self.map_err(|e| Exit { code, error: e.into() })
    }
}
