//! Run-time selection of a statically dispatched scheme.

use std::fmt;
use std::str::FromStr;

use crate::baseline::{Er, Hp, Ner, Qsr};
use crate::reclaim::{AllocHook, Scheme};
use crate::stamp_it::StampIt;

/// A scheme that can be built from just an allocator hook.
pub trait FromHook: Scheme {
    fn from_hook(hook: AllocHook) -> Self;
}

impl FromHook for StampIt {
    fn from_hook(hook: AllocHook) -> Self {
        StampIt::with_hook(hook)
    }
}

impl FromHook for Hp {
    fn from_hook(hook: AllocHook) -> Self {
        Hp::with_hook(hook)
    }
}

impl<const NEW: bool> FromHook for crate::baseline::Epoch<NEW> {
    fn from_hook(hook: AllocHook) -> Self {
        Self::with_hook(hook)
    }
}

impl FromHook for Qsr {
    fn from_hook(hook: AllocHook) -> Self {
        Qsr::with_hook(hook)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    StampIt,
    Hpr,
    Er,
    Ner,
    Qsr,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::StampIt,
        SchemeKind::Hpr,
        SchemeKind::Er,
        SchemeKind::Ner,
        SchemeKind::Qsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::StampIt => StampIt::NAME,
            SchemeKind::Hpr => Hp::NAME,
            SchemeKind::Er => Er::NAME,
            SchemeKind::Ner => Ner::NAME,
            SchemeKind::Qsr => Qsr::NAME,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown scheme `{0}` (expected stamp-it, hpr, er, ner or qsr)")]
pub struct UnknownScheme(String);

impl FromStr for SchemeKind {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "stampit" && *k == SchemeKind::StampIt))
            .ok_or(UnknownScheme(s))
    }
}

/// Expands `$body` once per scheme with `$S` bound to the concrete type.
#[macro_export]
macro_rules! with_scheme {
    ($kind:expr, $S:ident => $body:expr) => {
        match $kind {
            $crate::kind::SchemeKind::StampIt => {
                type $S = $crate::stamp_it::StampIt;
                $body
            }
            $crate::kind::SchemeKind::Hpr => {
                type $S = $crate::baseline::Hp;
                $body
            }
            $crate::kind::SchemeKind::Er => {
                type $S = $crate::baseline::Er;
                $body
            }
            $crate::kind::SchemeKind::Ner => {
                type $S = $crate::baseline::Ner;
                $body
            }
            $crate::kind::SchemeKind::Qsr => {
                type $S = $crate::baseline::Qsr;
                $body
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert_eq!(
            "StampIt".parse::<SchemeKind>().unwrap(),
            SchemeKind::StampIt
        );
        assert!("lfrc".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn dispatch_binds_the_type() {
        for k in SchemeKind::ALL {
            let name = with_scheme!(k, S => S::NAME);
            assert_eq!(name, k.name());
        }
    }
}
