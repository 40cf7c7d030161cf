//! Rainfall categories relative to a region's Long Period Average.

use serde::{Deserialize, Serialize};

use super::{LabelGrid, RasterGrid};
use crate::error::{Error, Result};
use crate::losses::INVALID_LABEL;

pub const CLASS_NAMES: [&str; 5] = ["Scarcity", "Deficit", "Normal", "Excess", "Large Excess"];

/// Half-open interval `[lower_mm, upper_mm)`; `upper_mm = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaClass {
    pub lower_mm: f64,
    pub upper_mm: Option<f64>,
    pub id: u8,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaScheme {
    pub region: String,
    pub lpa_mm: f64,
    pub classes: Vec<LpaClass>,
}

// (region, LPA, lower bounds of Scarcity..Large Excess)
const BUILTIN: [(&str, f64, [f64; 5]); 5] = [
    ("Assam", 328.6, [0.0, 131.0, 263.0, 395.0, 527.0]),
    ("Bihar", 216.5, [0.0, 87.0, 173.0, 260.0, 346.0]),
    ("Himachal Pradesh", 120.5, [0.0, 48.0, 96.0, 145.0, 192.8]),
    ("Karnataka", 271.8, [0.0, 109.0, 217.0, 326.0, 435.0]),
    ("Kerala", 144.1, [0.0, 58.0, 115.0, 173.0, 231.0]),
];

impl LpaScheme {
    /// Builds a scheme from ascending lower bounds; each class ends where the
    /// next begins and the last is open-ended.
    pub fn from_lower_bounds(region: &str, lpa_mm: f64, lowers: &[f64]) -> Result<Self> {
        if lowers.len() != CLASS_NAMES.len() {
            return Err(Error::invalid(format!(
                "expected {} class bounds, got {}",
                CLASS_NAMES.len(),
                lowers.len()
            )));
        }
        let classes = lowers
            .iter()
            .enumerate()
            .map(|(i, &lo)| LpaClass {
                lower_mm: lo,
                upper_mm: lowers.get(i + 1).copied(),
                id: i as u8,
                name: CLASS_NAMES[i].to_string(),
            })
            .collect();
        let s = Self {
            region: region.to_string(),
            lpa_mm,
            classes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn builtin(region: &str) -> Result<Self> {
        let (name, lpa, lowers) = BUILTIN
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(region))
            .ok_or_else(|| {
                let known: Vec<_> = BUILTIN.iter().map(|b| b.0).collect();
                Error::invalid(format!("unknown region {region:?}; known: {}", known.join(", ")))
            })?;
        Self::from_lower_bounds(name, *lpa, lowers)
    }

    pub fn all_builtin() -> Vec<Self> {
        BUILTIN
            .iter()
            .map(|(n, lpa, lowers)| Self::from_lower_bounds(n, *lpa, lowers).unwrap())
            .collect()
    }

    pub fn num_classes(&self) -> u8 {
        self.classes.len() as u8
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        if k == 0 || k >= INVALID_LABEL as usize {
            return Err(Error::invalid(format!("scheme has {k} classes")));
        }
        if !(self.lpa_mm.is_finite() && self.lpa_mm > 0.0) {
            return Err(Error::invalid("LPA must be positive"));
        }
        if self.classes[0].lower_mm != 0.0 {
            return Err(Error::invalid("first class must start at 0 mm"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::invalid(format!("class {} has id {}", i, c.id)));
            }
            match (c.upper_mm, self.classes.get(i + 1)) {
                (Some(hi), Some(next)) => {
                    if !(hi > c.lower_mm) || hi != next.lower_mm {
                        return Err(Error::invalid(format!(
                            "class {:?} [{}, {}) does not meet the next class at {}",
                            c.name, c.lower_mm, hi, next.lower_mm
                        )));
                    }
                }
                (None, None) => {}
                (Some(_), None) => return Err(Error::invalid("last class must be unbounded")),
                (None, Some(_)) => {
                    return Err(Error::invalid(format!("class {:?} is unbounded but not last", c.name)))
                }
            }
        }
        Ok(())
    }

    /// Class of a non-negative finite rainfall amount.
    pub fn classify(&self, mm: f64) -> Result<u8> {
        if !mm.is_finite() || mm < 0.0 {
            return Err(Error::invalid(format!("rainfall must be finite and ≥ 0, got {mm}")));
        }
        let idx = self.classes.partition_point(|c| c.lower_mm <= mm);
        Ok(self.classes[idx - 1].id)
    }
}

pub fn quantize_precip(rain: &RasterGrid, scheme: &LpaScheme) -> Result<LabelGrid> {
    if rain.channels != 1 {
        return Err(Error::invalid(format!(
            "rainfall grid must have 1 channel, got {}",
            rain.channels
        )));
    }
    scheme.validate()?;
    let labels = rain
        .values
        .iter()
        .zip(&rain.mask)
        .map(|(&v, &m)| if m { scheme.classify(v as f64) } else { Ok(INVALID_LABEL) })
        .collect::<Result<Vec<_>>>()?;
    LabelGrid::new(rain.height, rain.width, scheme.num_classes(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookups() {
        let assam = LpaScheme::builtin("Assam").unwrap();
        assert_eq!(assam.classify(100.0).unwrap(), 0);
        assert_eq!(assam.classify(300.0).unwrap(), 2);
        assert_eq!(assam.classify(394.5).unwrap(), 2);
        assert_eq!(assam.classify(395.0).unwrap(), 3);
        let bihar = LpaScheme::builtin("bihar").unwrap();
        assert_eq!(bihar.classify(400.0).unwrap(), 4);
        assert_eq!(bihar.classify(0.0).unwrap(), 0);
        let hp = LpaScheme::builtin("Himachal Pradesh").unwrap();
        assert_eq!(hp.classify(192.79).unwrap(), 3);
        assert_eq!(hp.classify(192.8).unwrap(), 4);
    }

    #[test]
    fn every_builtin_is_valid() {
        let all = LpaScheme::all_builtin();
        assert_eq!(all.len(), 5);
        for s in &all {
            s.validate().unwrap();
            assert_eq!(s.classes[4].name, "Large Excess");
        }
        assert!(LpaScheme::builtin("Atlantis").is_err());
    }

    #[test]
    fn negative_rain_is_an_error() {
        let s = LpaScheme::builtin("Kerala").unwrap();
        assert!(s.classify(-0.1).is_err());
        let rain = RasterGrid::new(1, 2, 1, vec![3.0, -1.0], vec![true, true]).unwrap();
        assert!(quantize_precip(&rain, &s).is_err());
    }

    #[test]
    fn masked_cells_become_invalid() {
        let s = LpaScheme::builtin("Kerala").unwrap();
        let rain = RasterGrid::new(1, 3, 1, vec![10.0, 0.0, 500.0], vec![true, false, true]).unwrap();
        let l = quantize_precip(&rain, &s).unwrap();
        assert_eq!(l.labels, vec![0, INVALID_LABEL, 4]);
    }

    #[test]
    fn broken_schemes_rejected() {
        let mut s = LpaScheme::builtin("Assam").unwrap();
        s.classes[1].upper_mm = Some(260.0);
        assert!(s.validate().is_err());
        assert!(LpaScheme::from_lower_bounds("x", 10.0, &[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(LpaScheme::from_lower_bounds("x", 10.0, &[0.0, 2.0, 2.0, 4.0, 5.0]).is_err());
    }
}
