//! Bandwidth scenarios and transfer-delay arithmetic.
//!
//! Sizes use binary units throughout: 1 KB = 1024 B, 1 MB = 1024 KB. The
//! delay of a payload is pure size/bandwidth — no jitter, no propagation term
//! unless a fixed round-trip add-on is explicitly configured.

use crate::harness::ConfigError;

pub const BYTES_PER_MB: f64 = 1_048_576.0;

/// A named link speed, e.g. "4G" at 5 MB/s.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScenario {
    pub name: String,
    pub bandwidth_mbps: f64,
}

impl NetworkScenario {
    pub fn new(name: impl Into<String>, bandwidth_mbps: f64) -> Result<Self, ConfigError> {
        let name = name.into();
        if !bandwidth_mbps.is_finite() || bandwidth_mbps <= 0.0 {
            return Err(ConfigError::BadValue {
                key: format!("scenario {name}"),
                detail: format!("bandwidth must be a positive number of MB/s, got {bandwidth_mbps}"),
            });
        }
        Ok(Self { name, bandwidth_mbps })
    }
}

/// The four link speeds every report covers by default.
pub fn default_scenarios() -> Vec<NetworkScenario> {
    [("4G", 5.0), ("4G", 15.0), ("5G", 50.0), ("5G", 100.0)]
        .into_iter()
        .map(|(n, b)| NetworkScenario::new(n, b).unwrap())
        .collect()
}

/// Milliseconds to move `bytes` across the link. Zero bytes take zero time.
pub fn transfer_delay(bytes: u64, scenario: &NetworkScenario) -> f64 {
    bytes as f64 / (scenario.bandwidth_mbps * BYTES_PER_MB) * 1000.0
}

/// Upload payload: the fused feature as 32-bit floats.
pub fn payload_bytes_up(d_model: usize) -> u64 {
    4 * d_model as u64
}

/// Download payload: one generated head (weights + bias) as 32-bit floats.
pub fn payload_bytes_down(in_dim: usize, out_dim: usize) -> u64 {
    4 * (in_dim as u64 * out_dim as u64 + out_dim as u64)
}

// ── scenario files ───────────────────────────────────────────────────────

/// Parse a scenario listing: one `name=bandwidth_MBps` per line, `#` starts
/// a comment, blank lines ignored. The bandwidth is the text after the LAST
/// `=`, so names may themselves contain `=`.
pub fn parse_scenarios(text: &str) -> Result<Vec<NetworkScenario>, ConfigError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some(split) = line.rfind('=') else {
            return Err(ConfigError::invalid(format!(
                "scenario line {}: expected name=bandwidth_MBps, got {line:?}",
                lineno + 1
            )));
        };
        let name = line[..split].trim();
        let value = line[split + 1..].trim();
        if name.is_empty() {
            return Err(ConfigError::invalid(format!("scenario line {}: empty name", lineno + 1)));
        }
        let bandwidth: f64 = value.parse().map_err(|_| {
            ConfigError::invalid(format!(
                "scenario line {}: bandwidth {value:?} is not a number",
                lineno + 1
            ))
        })?;
        out.push(NetworkScenario::new(name, bandwidth)?);
    }
    if out.is_empty() {
        return Err(ConfigError::invalid("scenario file lists no scenarios"));
    }
    Ok(out)
}

pub fn load_scenarios(path: &std::path::Path) -> crate::Result<Vec<NetworkScenario>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::Error::io(format!("reading scenario file {}", path.display()), e))?;
    Ok(parse_scenarios(&text)?)
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_arithmetic_is_exact() {
        assert_eq!(payload_bytes_up(192), 768); // 0.75 KB
        assert_eq!(payload_bytes_down(96, 1501), 582_388);
        assert_eq!(payload_bytes_down(1, 1), 8);
    }

    #[test]
    fn delay_formula_uses_binary_units() {
        let s5 = NetworkScenario::new("4G", 5.0).unwrap();
        // 568.5 KB at 5 MB/s: (568.5·1024)/(5·1048576)·1000 = 111.035… ms
        let bytes = (568.5 * 1024.0) as u64;
        let ms = transfer_delay(bytes, &s5);
        assert!((ms - 111.035).abs() < 0.01, "got {ms}");

        let s100 = NetworkScenario::new("5G", 100.0).unwrap();
        let ms = transfer_delay(768, &s100);
        assert!((ms - 0.00732).abs() < 1e-4, "got {ms}");

        assert_eq!(transfer_delay(0, &s5), 0.0);
    }

    #[test]
    fn scenario_file_round_trip_and_errors() {
        let text = "
            # links for the bench
            4G = 5
            4G = 15   # the faster cell
            5G=50
            my=odd=name = 100
        ";
        let got = parse_scenarios(text).unwrap();
        assert_eq!(got.len(), 4);
        assert_eq!(got[0], NetworkScenario::new("4G", 5.0).unwrap());
        assert_eq!(got[3].name, "my=odd=name");
        assert_eq!(got[3].bandwidth_mbps, 100.0);

        assert!(parse_scenarios("").is_err());
        assert!(parse_scenarios("just a name").is_err());
        assert!(parse_scenarios("x = fast").is_err());
        assert!(parse_scenarios("x = 0").is_err());
        assert!(parse_scenarios("x = -3").is_err());
        assert!(parse_scenarios(" = 5").is_err());
    }

    #[test]
    fn default_scenarios_cover_the_four_link_speeds() {
        let s = default_scenarios();
        let speeds: Vec<f64> = s.iter().map(|x| x.bandwidth_mbps).collect();
        assert_eq!(speeds, vec![5.0, 15.0, 50.0, 100.0]);
        assert_eq!(s[0].name, "4G");
        assert_eq!(s[3].name, "5G");
    }
}
