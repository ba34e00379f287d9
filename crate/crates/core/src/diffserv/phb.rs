use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// 6-bit DiffServ codepoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Dscp(pub u8);

impl Dscp {
    pub const BE: Dscp = Dscp(0);
    pub const EF: Dscp = Dscp(46);
    pub const AF11: Dscp = Dscp(10);
    pub const AF12: Dscp = Dscp(12);
    pub const AF21: Dscp = Dscp(18);
}

/// Per-hop behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phb {
    Ef,
    /// Assured forwarding class 1..=4, drop precedence 1..=3.
    Af(u8, u8),
    Be,
}

impl Phb {
    pub fn dscp(self) -> Dscp {
        match self {
            Phb::Ef => Dscp::EF,
            Phb::Af(class, drop) => Dscp(8 * class + 2 * drop),
            Phb::Be => Dscp::BE,
        }
    }

    /// Unknown codepoints fall back to best effort.
    pub fn from_dscp(d: Dscp) -> Phb {
        if d == Dscp::EF {
            return Phb::Ef;
        }
        let (class, drop) = (d.0 / 8, (d.0 % 8) / 2);
        if d.0 % 2 == 0 && (1..=4).contains(&class) && (1..=3).contains(&drop) {
            Phb::Af(class, drop)
        } else {
            Phb::Be
        }
    }

    pub fn class(self) -> TrafficClass {
        match self {
            Phb::Ef => TrafficClass::Ef,
            Phb::Af(1, _) => TrafficClass::Af1,
            Phb::Af(2, _) => TrafficClass::Af2,
            Phb::Af(3, _) => TrafficClass::Af3,
            Phb::Af(_, _) => TrafficClass::Af4,
            Phb::Be => TrafficClass::Be,
        }
    }

    /// Higher drop precedence within the same AF class; other PHBs unchanged.
    pub fn remark_out_of_profile(self) -> Phb {
        match self {
            Phb::Af(c, d) => Phb::Af(c, (d + 1).min(3)),
            other => other,
        }
    }
}

impl fmt::Display for Phb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phb::Ef => f.write_str("EF"),
            Phb::Af(c, d) => write!(f, "AF{c}{d}"),
            Phb::Be => f.write_str("BE"),
        }
    }
}

impl FromStr for Phb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        match up.as_str() {
            "EF" => Ok(Phb::Ef),
            "BE" => Ok(Phb::Be),
            _ => {
                let digits = up
                    .strip_prefix("AF")
                    .ok_or_else(|| format!("unknown PHB `{s}`"))?;
                let b = digits.as_bytes();
                if b.len() == 2 {
                    let (c, d) = (b[0].wrapping_sub(b'0'), b[1].wrapping_sub(b'0'));
                    if (1..=4).contains(&c) && (1..=3).contains(&d) {
                        return Ok(Phb::Af(c, d));
                    }
                }
                Err(format!("unknown PHB `{s}`"))
            }
        }
    }
}

impl Serialize for Phb {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Phb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scheduling classes in strict priority order, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrafficClass {
    Ef = 0,
    Af1 = 1,
    Af2 = 2,
    Af3 = 3,
    Af4 = 4,
    Be = 5,
}

impl TrafficClass {
    pub const ALL: [TrafficClass; 6] = [
        TrafficClass::Ef,
        TrafficClass::Af1,
        TrafficClass::Af2,
        TrafficClass::Af3,
        TrafficClass::Af4,
        TrafficClass::Be,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of(d: Dscp) -> TrafficClass {
        Phb::from_dscp(d).class()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codepoints() {
        assert_eq!(Phb::Ef.dscp(), Dscp(46));
        assert_eq!(Phb::Be.dscp(), Dscp(0));
        for c in 1..=4u8 {
            for d in 1..=3u8 {
                let p = Phb::Af(c, d);
                assert_eq!(p.dscp().0, 8 * c + 2 * d);
                assert_eq!(Phb::from_dscp(p.dscp()), p);
            }
        }
        assert_eq!(Phb::from_dscp(Dscp(63)), Phb::Be);
    }

    #[test]
    fn parse_and_display() {
        assert_eq!("af21".parse::<Phb>().unwrap(), Phb::Af(2, 1));
        assert_eq!("EF".parse::<Phb>().unwrap().to_string(), "EF");
        assert!("AF51".parse::<Phb>().is_err());
        assert!("XY".parse::<Phb>().is_err());
    }

    #[test]
    fn remark_bumps_precedence() {
        assert_eq!(Phb::Af(1, 1).remark_out_of_profile(), Phb::Af(1, 2));
        assert_eq!(Phb::Af(1, 3).remark_out_of_profile(), Phb::Af(1, 3));
        assert_eq!(Phb::Ef.remark_out_of_profile(), Phb::Ef);
    }
}
