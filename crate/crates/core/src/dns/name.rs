use std::fmt;
use std::str::FromStr;

use super::DnsError;

pub const MAX_LABEL_LEN: usize = 63;
/// Wire-length limit for names carried in classic DNS messages.
pub const MAX_NAME_WIRE_LEN: usize = 255;

/// A domain name as a sequence of ASCII labels, root label implied.
///
/// Case is preserved as given; [`Name::canonical`] folds it. The wire length
/// is only bounded when the name is put into a classic DNS message, since
/// track names may legitimately be longer.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Name {
    labels: Vec<Vec<u8>>,
}

impl Name {
    pub fn root() -> Self {
        Name { labels: Vec::new() }
    }

    pub fn from_labels<I, L>(labels: I) -> Result<Self, DnsError>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<[u8]>,
    {
        let labels = labels
            .into_iter()
            .map(|l| {
                let l = l.as_ref();
                check_label(l)?;
                Ok(l.to_vec())
            })
            .collect::<Result<Vec<_>, DnsError>>()?;
        Ok(Name { labels })
    }

    /// Parses presentation form. The trailing dot is optional; `"."` is the
    /// root. Escapes are not supported.
    pub fn parse(s: &str) -> Result<Self, DnsError> {
        if s == "." || s.is_empty() {
            return Ok(Name::root());
        }
        let trimmed = s.strip_suffix('.').unwrap_or(s);
        Name::from_labels(trimmed.split('.').map(str::as_bytes))
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn is_root(&self) -> bool {
        self.labels.is_empty()
    }

    /// Length of the uncompressed wire form, including the root byte.
    pub fn wire_len(&self) -> usize {
        self.labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    /// Lowercase copy.
    pub fn canonical(&self) -> Name {
        Name {
            labels: self.labels.iter().map(|l| l.to_ascii_lowercase()).collect(),
        }
    }

    pub fn eq_ignore_case(&self, other: &Name) -> bool {
        self.labels.len() == other.labels.len()
            && self
                .labels
                .iter()
                .zip(&other.labels)
                .all(|(a, b)| a.eq_ignore_ascii_case(b))
    }

    /// True if `self` equals `ancestor` or lies below it (case-insensitive).
    pub fn is_at_or_below(&self, ancestor: &Name) -> bool {
        let n = ancestor.labels.len();
        self.labels.len() >= n
            && self.labels[self.labels.len() - n..]
                .iter()
                .zip(&ancestor.labels)
                .all(|(a, b)| a.eq_ignore_ascii_case(b))
    }

    /// The name with its leftmost label removed; `None` for the root.
    pub fn parent(&self) -> Option<Name> {
        if self.labels.is_empty() {
            None
        } else {
            Some(Name {
                labels: self.labels[1..].to_vec(),
            })
        }
    }

    /// `label` prepended to this name.
    pub fn child(&self, label: &str) -> Result<Name, DnsError> {
        check_label(label.as_bytes())?;
        let mut labels = Vec::with_capacity(self.labels.len() + 1);
        labels.push(label.as_bytes().to_vec());
        labels.extend(self.labels.iter().cloned());
        Ok(Name { labels })
    }

    /// Uncompressed wire form.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_wire(&mut out);
        out
    }

    pub(crate) fn write_wire(&self, out: &mut Vec<u8>) {
        for l in &self.labels {
            out.push(l.len() as u8);
            out.extend_from_slice(l);
        }
        out.push(0);
    }

    /// Parses an uncompressed wire-form name that must span all of `buf`.
    pub fn from_wire(buf: &[u8]) -> Result<Name, DnsError> {
        let mut labels = Vec::new();
        let mut at = 0;
        loop {
            let len = *buf.get(at).ok_or(DnsError::Truncated)? as usize;
            at += 1;
            if len == 0 {
                break;
            }
            if len > MAX_LABEL_LEN {
                return Err(DnsError::BadLabelType(len as u8));
            }
            let label = buf.get(at..at + len).ok_or(DnsError::Truncated)?;
            check_label(label)?;
            labels.push(label.to_vec());
            at += len;
        }
        if at != buf.len() {
            return Err(DnsError::TrailingData);
        }
        Ok(Name { labels })
    }
}

pub(crate) fn check_label(l: &[u8]) -> Result<(), DnsError> {
    if l.is_empty() {
        return Err(DnsError::EmptyLabel);
    }
    if l.len() > MAX_LABEL_LEN {
        return Err(DnsError::LabelTooLong(l.len()));
    }
    if !l.is_ascii() {
        return Err(DnsError::NonAsciiLabel);
    }
    Ok(())
}

/// Lowercases and root-qualifies `name`.
pub fn canonicalize_name(name: &Name) -> Name {
    // Names are always stored fully qualified, so only case needs folding.
    name.canonical()
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            return f.write_str(".");
        }
        for l in &self.labels {
            f.write_str(&String::from_utf8_lossy(l))?;
            f.write_str(".")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Name({self})")
    }
}

impl FromStr for Name {
    type Err = DnsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Name::parse(s)
    }
}
