//! Error categories reported on exit.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Dependency,
    Model,
    Io,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Input => "input",
            Self::Dependency => "dependency",
            Self::Model => "model",
            Self::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Self::Config => 3,
            Self::Input => 4,
            Self::Dependency => 5,
            Self::Model => 6,
            Self::Io => 7,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub category: Category,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn fail(category: Category, message: impl Into<String>) -> anyhow::Error {
    Failure { category, message: message.into() }.into()
}

/// Category of an error chain: the first explicit [`Failure`], else inferred
/// from the underlying error type.
pub fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.category;
        }
        if cause.downcast_ref::<shotcox::Error>().is_some() {
            return Category::Model;
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return Category::Input;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Io;
        }
    }
    Category::Model
}
