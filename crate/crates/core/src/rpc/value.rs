use std::fmt;

/// A value in the supported XML-RPC subset.
///
/// Structs keep their members in insertion order; duplicate keys are
/// representable so that the encoder can reject them.
#[derive(Debug, Clone, PartialEq)]
pub enum RpcValue {
    String(String),
    Int(i32),
    Double(f64),
    Bool(bool),
    Base64(Vec<u8>),
    Array(Vec<RpcValue>),
    Struct(Vec<(String, RpcValue)>),
}

/// Error raised when a value does not have the shape a caller expects.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ValueError(pub String);

impl ValueError {
    pub fn expected(what: &str, got: &RpcValue) -> Self {
        ValueError(format!("expected {what}, got {}", got.kind()))
    }

    pub fn missing(key: &str) -> Self {
        ValueError(format!("missing struct member `{key}`"))
    }
}

impl RpcValue {
    /// Builds a struct value from `(key, value)` pairs.
    pub fn record<K, I>(members: I) -> Self
    where
        K: Into<String>,
        I: IntoIterator<Item = (K, RpcValue)>,
    {
        RpcValue::Struct(members.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RpcValue::String(_) => "string",
            RpcValue::Int(_) => "i4",
            RpcValue::Double(_) => "double",
            RpcValue::Bool(_) => "boolean",
            RpcValue::Base64(_) => "base64",
            RpcValue::Array(_) => "array",
            RpcValue::Struct(_) => "struct",
        }
    }

    pub fn as_str(&self) -> Result<&str, ValueError> {
        match self {
            RpcValue::String(s) => Ok(s),
            other => Err(ValueError::expected("string", other)),
        }
    }

    pub fn as_i32(&self) -> Result<i32, ValueError> {
        match self {
            RpcValue::Int(i) => Ok(*i),
            other => Err(ValueError::expected("i4", other)),
        }
    }

    /// Accepts both `i4` and `double`.
    pub fn as_f64(&self) -> Result<f64, ValueError> {
        match self {
            RpcValue::Double(d) => Ok(*d),
            RpcValue::Int(i) => Ok(f64::from(*i)),
            other => Err(ValueError::expected("double", other)),
        }
    }

    pub fn as_bool(&self) -> Result<bool, ValueError> {
        match self {
            RpcValue::Bool(b) => Ok(*b),
            other => Err(ValueError::expected("boolean", other)),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8], ValueError> {
        match self {
            RpcValue::Base64(b) => Ok(b),
            other => Err(ValueError::expected("base64", other)),
        }
    }

    pub fn as_array(&self) -> Result<&[RpcValue], ValueError> {
        match self {
            RpcValue::Array(a) => Ok(a),
            other => Err(ValueError::expected("array", other)),
        }
    }

    pub fn as_struct(&self) -> Result<&[(String, RpcValue)], ValueError> {
        match self {
            RpcValue::Struct(m) => Ok(m),
            other => Err(ValueError::expected("struct", other)),
        }
    }

    /// Looks up a struct member; `None` for missing keys or non-struct values.
    pub fn get(&self, key: &str) -> Option<&RpcValue> {
        match self {
            RpcValue::Struct(m) => m.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    pub fn member(&self, key: &str) -> Result<&RpcValue, ValueError> {
        self.as_struct()?;
        self.get(key).ok_or_else(|| ValueError::missing(key))
    }

    pub fn string_list(&self) -> Result<Vec<String>, ValueError> {
        self.as_array()?
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect()
    }
}

impl From<&str> for RpcValue {
    fn from(s: &str) -> Self {
        RpcValue::String(s.to_owned())
    }
}

impl From<String> for RpcValue {
    fn from(s: String) -> Self {
        RpcValue::String(s)
    }
}

impl From<i32> for RpcValue {
    fn from(i: i32) -> Self {
        RpcValue::Int(i)
    }
}

impl From<f64> for RpcValue {
    fn from(d: f64) -> Self {
        RpcValue::Double(d)
    }
}

impl From<bool> for RpcValue {
    fn from(b: bool) -> Self {
        RpcValue::Bool(b)
    }
}

impl From<Vec<u8>> for RpcValue {
    fn from(b: Vec<u8>) -> Self {
        RpcValue::Base64(b)
    }
}

impl<T: Into<RpcValue>> From<Vec<T>> for RpcValue {
    fn from(items: Vec<T>) -> Self {
        RpcValue::Array(items.into_iter().map(Into::into).collect())
    }
}

impl fmt::Display for RpcValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpcValue::String(s) => write!(f, "{s:?}"),
            RpcValue::Int(i) => write!(f, "{i}"),
            RpcValue::Double(d) => write!(f, "{d}"),
            RpcValue::Bool(b) => write!(f, "{b}"),
            RpcValue::Base64(b) => write!(f, "<{} bytes>", b.len()),
            RpcValue::Array(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            RpcValue::Struct(members) => {
                f.write_str("{")?;
                for (i, (k, v)) in members.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}
