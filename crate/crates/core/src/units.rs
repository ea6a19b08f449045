//! Unit-annotated quantities used in scenario files.
//!
//! A quantity is written as `"<number> [pi] <unit>"`, e.g. `"8 kW"`,
//! `"0.02 pi rad/s/kW"` or `"120 V"`. Every quantity is normalized to SI
//! on parse; the optional `pi` token multiplies the number by π.

use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Power,
    ReactivePower,
    Impedance,
    Voltage,
    Time,
    AngularFrequency,
    FrequencyDroop,
    VoltageDroop,
    Inertia,
    Torque,
    TorqueTime,
    Dimensionless,
}

impl Dim {
    /// Unit written when serializing in SI.
    pub fn si_unit(self) -> &'static str {
        match self {
            Dim::Power => "W",
            Dim::ReactivePower => "VAR",
            Dim::Impedance => "ohm",
            Dim::Voltage => "V",
            Dim::Time => "s",
            Dim::AngularFrequency => "rad/s",
            Dim::FrequencyDroop => "rad/s/W",
            Dim::VoltageDroop => "V/VAR",
            Dim::Inertia => "kg*m^2",
            Dim::Torque => "N*m",
            Dim::TorqueTime => "N*m*s",
            Dim::Dimensionless => "",
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

const UNITS: &[(&str, Dim, f64)] = &[
    ("W", Dim::Power, 1.0),
    ("kW", Dim::Power, 1e3),
    ("MW", Dim::Power, 1e6),
    ("VAR", Dim::ReactivePower, 1.0),
    ("var", Dim::ReactivePower, 1.0),
    ("kVAR", Dim::ReactivePower, 1e3),
    ("kvar", Dim::ReactivePower, 1e3),
    ("MVAR", Dim::ReactivePower, 1e6),
    ("ohm", Dim::Impedance, 1.0),
    ("Ω", Dim::Impedance, 1.0),
    ("mohm", Dim::Impedance, 1e-3),
    ("V", Dim::Voltage, 1.0),
    ("kV", Dim::Voltage, 1e3),
    ("s", Dim::Time, 1.0),
    ("ms", Dim::Time, 1e-3),
    ("rad/s", Dim::AngularFrequency, 1.0),
    ("Hz", Dim::AngularFrequency, 2.0 * PI),
    ("rad/s/W", Dim::FrequencyDroop, 1.0),
    ("rad/s/kW", Dim::FrequencyDroop, 1e-3),
    ("rad·s⁻¹·W⁻¹", Dim::FrequencyDroop, 1.0),
    ("rad·s⁻¹·kW⁻¹", Dim::FrequencyDroop, 1e-3),
    ("V/VAR", Dim::VoltageDroop, 1.0),
    ("V/kVAR", Dim::VoltageDroop, 1e-3),
    ("V·VAR⁻¹", Dim::VoltageDroop, 1.0),
    ("V·kVAR⁻¹", Dim::VoltageDroop, 1e-3),
    ("kg*m^2", Dim::Inertia, 1.0),
    ("kg·m²", Dim::Inertia, 1.0),
    ("N*m", Dim::Torque, 1.0),
    ("N·m", Dim::Torque, 1.0),
    ("N*m*s", Dim::TorqueTime, 1.0),
    ("N·m·s", Dim::TorqueTime, 1.0),
    ("", Dim::Dimensionless, 1.0),
    ("1", Dim::Dimensionless, 1.0),
];

/// Parses a quantity string and converts it to SI, checking its dimension.
pub fn parse_quantity(text: &str, expected: Dim) -> Result<f64, String> {
    let mut tokens = text.split_whitespace();
    let number = tokens
        .next()
        .ok_or_else(|| "empty quantity".to_string())?;
    let mut value: f64 = number
        .parse()
        .map_err(|_| format!("`{number}` is not a number"))?;
    let mut rest: Vec<&str> = tokens.collect();
    if rest.first() == Some(&"pi") {
        value *= PI;
        rest.remove(0);
    }
    if rest.len() > 1 {
        return Err(format!("unexpected tokens in `{text}`"));
    }
    let unit = rest.first().copied().unwrap_or("");
    let (_, dim, scale) = UNITS
        .iter()
        .find(|(name, _, _)| *name == unit)
        .ok_or_else(|| format!("unknown unit `{unit}`"))?;
    if *dim != expected {
        return Err(format!(
            "unit `{unit}` has dimension {dim}, expected {expected} (e.g. `{}`)",
            expected.si_unit()
        ));
    }
    if !value.is_finite() {
        return Err(format!("`{number}` is not finite"));
    }
    Ok(value * scale)
}

/// Formats an SI value so that `parse_quantity` reproduces it bit for bit.
pub fn format_si(value: f64, dim: Dim) -> String {
    let unit = dim.si_unit();
    if unit.is_empty() {
        format!("{value:e}")
    } else {
        format!("{value:e} {unit}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_ii_droop_normalizes_to_si() {
        let k = parse_quantity("2e-2 pi rad/s/kW", Dim::FrequencyDroop).unwrap();
        assert!((k - 2.0 * PI * 1e-5).abs() < 1e-18);
        let q = parse_quantity("0.4 V/kVAR", Dim::VoltageDroop).unwrap();
        assert!((q - 4e-4).abs() < 1e-18);
    }

    #[test]
    fn kw_and_w_agree() {
        let a = parse_quantity("8 kW", Dim::Power).unwrap();
        let b = parse_quantity("8000 W", Dim::Power).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_dimension_and_garbage() {
        assert!(parse_quantity("8 kVAR", Dim::Power).is_err());
        assert!(parse_quantity("abc W", Dim::Power).is_err());
        assert!(parse_quantity("1 furlong", Dim::Time).is_err());
        assert!(parse_quantity("", Dim::Time).is_err());
    }

    #[test]
    fn si_format_round_trips() {
        for v in [6.283185307179586e-5, 0.1, 120.0, -3.0e3, 1.0 / 3.0] {
            let s = format_si(v, Dim::FrequencyDroop);
            assert_eq!(parse_quantity(&s, Dim::FrequencyDroop).unwrap(), v);
        }
    }
}
