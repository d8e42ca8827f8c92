use crate::error::{Error, Result};

/// Class names in id order.
pub const CLASS_NAMES: [&str; 4] = ["kneeApView", "kneeLatView", "tkaApView", "tkaLatView"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSchema {
    names: Vec<String>,
}

impl Default for ClassSchema {
    fn default() -> Self {
        ClassSchema {
            names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidInput("class schema is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidInput(format!("duplicate class name '{n}'")));
            }
        }
        Ok(ClassSchema { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}
