//! Training carbon-footprint arithmetic.

use crate::error::{Error, Result};

/// Inputs to the emissions estimate: data-center power usage effectiveness,
/// energy drawn in kilowatt-hours, and grid carbon intensity in grams of
/// CO2 per kilowatt-hour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmissionsInput {
    pub pue: f64,
    pub kwh: f64,
    pub intensity: f64,
}

impl EmissionsInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.pue >= 1.0 && self.pue.is_finite()) {
            return Err(Error::input(format!(
                "PUE is a ratio of total to IT power and cannot be below 1, got {}",
                self.pue
            )));
        }
        if !(self.kwh >= 0.0 && self.kwh.is_finite()) {
            return Err(Error::input(format!("kWh must be non-negative, got {}", self.kwh)));
        }
        if !(self.intensity >= 0.0 && self.intensity.is_finite()) {
            return Err(Error::input(format!(
                "carbon intensity must be non-negative, got {}",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Kilograms of CO2: `pue * kwh * intensity / 1000`, the factor converting
/// gram-denominated intensity to kilograms.
pub fn co2_estimate(input: &EmissionsInput) -> Result<f64> {
    input.validate()?;
    Ok(input.pue * input.kwh * input.intensity / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cancellation_case() {
        let input = EmissionsInput { pue: 1.0, kwh: 1000.0, intensity: 1000.0 };
        assert_eq!(co2_estimate(&input).unwrap(), 1000.0);
    }

    #[test]
    fn zero_energy_means_zero_emissions() {
        let input = EmissionsInput { pue: 1.58, kwh: 0.0, intensity: 412.0 };
        assert_eq!(co2_estimate(&input).unwrap(), 0.0);
    }

    #[test]
    fn scaled_case() {
        let input = EmissionsInput { pue: 1.25, kwh: 2000.0, intensity: 400.0 };
        assert_eq!(co2_estimate(&input).unwrap(), 1000.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(co2_estimate(&EmissionsInput { pue: 0.9, kwh: 1.0, intensity: 1.0 }).is_err());
        assert!(co2_estimate(&EmissionsInput { pue: 1.0, kwh: -1.0, intensity: 1.0 }).is_err());
        assert!(co2_estimate(&EmissionsInput { pue: 1.0, kwh: 1.0, intensity: -0.1 }).is_err());
        assert!(co2_estimate(&EmissionsInput { pue: f64::NAN, kwh: 1.0, intensity: 1.0 }).is_err());
    }
}
