//! On-disk formats: circuit files and evaluation reports (JSON) and sweep tables (CSV).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chsh::{BellMeasurement, Binning};
use crate::circuit::{Circuit, Evaluation};
use crate::error::{Error, Result};
use crate::gaussian::{squeezing_db, Gate, GateKind};
use crate::herald::{HeraldScheme, HeraldSpec, ModeHerald};
use crate::optimize::{SweepPoint, SweepResult, SweepVariable};

pub const FORMAT_VERSION: u32 = 1;

/// Significant digits written to sweep tables.
const CSV_DIGITS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateEntry {
    pub kind: GateKind,
    /// 1-based.
    pub modes: Vec<usize>,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeraldEntry {
    pub scheme: HeraldScheme,
    pub eta: f64,
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedBinning {
    Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BinningEntry {
    Named(NamedBinning),
    Custom(Binning),
}

impl BinningEntry {
    fn from_binning(b: &Binning) -> Self {
        if b.is_sign() {
            Self::Named(NamedBinning::Sign)
        } else {
            Self::Custom(b.clone())
        }
    }

    fn to_binning(&self) -> Result<Binning> {
        match self {
            Self::Named(NamedBinning::Sign) => Ok(Binning::sign()),
            Self::Custom(b) => Ok(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementEntry {
    pub theta0: f64,
    pub theta1: f64,
    pub phi0: f64,
    pub phi1: f64,
    /// Applied to both parties unless `bob_binning` is given.
    pub binning: BinningEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bob_binning: Option<BinningEntry>,
}

impl MeasurementEntry {
    pub fn from_measurement(m: &BellMeasurement) -> Self {
        let bob = (m.bob_binning != m.alice_binning).then(|| BinningEntry::from_binning(&m.bob_binning));
        Self {
            theta0: m.theta[0],
            theta1: m.theta[1],
            phi0: m.phi[0],
            phi1: m.phi[1],
            binning: BinningEntry::from_binning(&m.alice_binning),
            bob_binning: bob,
        }
    }

    pub fn to_measurement(&self) -> Result<BellMeasurement> {
        let alice = self.binning.to_binning()?;
        let bob = match &self.bob_binning {
            Some(b) => b.to_binning()?,
            None => alice.clone(),
        };
        Ok(BellMeasurement {
            theta: [self.theta0, self.theta1],
            phi: [self.phi0, self.phi1],
            alice_binning: alice,
            bob_binning: bob,
        })
    }
}

/// A circuit with its heralding and (optionally) Bell measurement, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitFile {
    pub format: u32,
    pub n_modes: usize,
    pub gates: Vec<GateEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub herald: Option<HeraldEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CircuitFile {
    /// Fails if the heralds mix schemes or efficiencies, which the file format cannot express.
    pub fn from_circuit(circuit: &Circuit, measurement: Option<&BellMeasurement>) -> Result<Self> {
        let herald = match circuit.herald.modes.first() {
            None => None,
            Some(first) => {
                if circuit.herald.modes.iter().any(|h| h.scheme != first.scheme || h.eta != first.eta) {
                    return Err(Error::Format("heralds with mixed schemes or efficiencies".into()));
                }
                Some(HeraldEntry {
                    scheme: first.scheme,
                    eta: first.eta,
                    modes: circuit.herald.modes.iter().map(|h| h.mode).collect(),
                })
            }
        };
        Ok(Self {
            format: FORMAT_VERSION,
            n_modes: circuit.n_modes,
            gates: circuit
                .gates
                .iter()
                .map(|g| GateEntry { kind: g.kind, modes: g.modes.clone(), param: g.param })
                .collect(),
            herald,
            measurement: measurement.map(MeasurementEntry::from_measurement),
            note: None,
        })
    }

    pub fn circuit(&self) -> Result<Circuit> {
        if self.format != FORMAT_VERSION {
            return Err(Error::Format(format!("circuit format {} is not {FORMAT_VERSION}", self.format)));
        }
        let gates = self
            .gates
            .iter()
            .map(|g| Gate::new(g.kind, g.modes.clone(), g.param))
            .collect::<Result<Vec<_>>>()?;
        let herald = match &self.herald {
            None => HeraldSpec::none(),
            Some(h) => HeraldSpec {
                modes: h.modes.iter().map(|&mode| ModeHerald { mode, scheme: h.scheme, eta: h.eta }).collect(),
            },
        };
        Circuit::new(self.n_modes, gates, herald)
    }

    /// The stored measurement, or the default one.
    pub fn measurement(&self) -> Result<BellMeasurement> {
        self.measurement.as_ref().map_or_else(|| Ok(BellMeasurement::default()), |m| m.to_measurement())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.circuit()?;
        file.measurement()?;
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("circuit files always serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &(self.to_json() + "\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezingEntry {
    pub gate: String,
    pub r: f64,
    pub db: f64,
}

/// Outcome of evaluating one circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub chsh: f64,
    pub chsh_error_bound: f64,
    pub herald_probability: f64,
    /// `correlators[x][y] = <A_x B_y>`
    pub correlators: [[f64; 2]; 2],
    pub heralded: bool,
    pub stage_probabilities: Vec<f64>,
    pub squeezing: Vec<SqueezingEntry>,
}

impl EvalReport {
    pub fn new(circuit: &Circuit, eval: &Evaluation, seed: Option<u64>) -> Self {
        Self {
            format: FORMAT_VERSION,
            seed,
            chsh: eval.chsh,
            chsh_error_bound: eval.error_bound,
            herald_probability: eval.herald_probability,
            correlators: eval.correlators,
            heralded: eval.heralded,
            stage_probabilities: eval.stages.clone(),
            squeezing: squeezing_entries(circuit),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

pub fn squeezing_entries(circuit: &Circuit) -> Vec<SqueezingEntry> {
    circuit
        .gates
        .iter()
        .filter(|g| g.kind.is_squeezer())
        .map(|g| SqueezingEntry { gate: g.to_string(), r: g.param, db: squeezing_db(g.param) })
        .collect()
}

fn fmt_sig(v: f64) -> String {
    format!("{v:.prec$e}", prec = CSV_DIGITS - 1)
}

/// Header plus one `x,chsh,herald_probability` row per point.
pub fn sweep_to_csv(sweep: &SweepResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([sweep.variable.name(), "chsh", "herald_probability"]).map_err(csv_err)?;
    for p in &sweep.points {
        w.write_record([fmt_sig(p.x), fmt_sig(p.chsh), fmt_sig(p.herald_probability)]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is ASCII"))
}

/// Parses a sweep table, checking the header and that the first column strictly increases.
/// Gate parameters and angles are not stored, so they come back empty.
pub fn sweep_from_csv(text: &str) -> Result<SweepResult> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let variable = match header.get(0) {
        Some("distance_km") => SweepVariable::DistanceKm,
        Some("eta") => SweepVariable::Eta,
        other => return Err(Error::Format(format!("unknown sweep variable {other:?}"))),
    };
    if header.len() != 3 || &header[1] != "chsh" || &header[2] != "herald_probability" {
        return Err(Error::Format(format!("unexpected sweep header {header:?}")));
    }
    let mut points: Vec<SweepPoint> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad number in column {i} of {rec:?}")))
        };
        let x = num(0)?;
        if points.last().is_some_and(|p| p.x >= x) {
            return Err(Error::Format(format!("sweep column is not strictly increasing at {x}")));
        }
        points.push(SweepPoint { x, chsh: num(1)?, herald_probability: num(2)?, params: vec![], angles: [0.0; 4] });
    }
    Ok(SweepResult { variable, points })
}

pub fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1: &str = r#"{
        "format": 1,
        "n_modes": 4,
        "gates": [
            {"kind": "S2", "modes": [1, 2], "param": 0.00096},
            {"kind": "S2", "modes": [3, 4], "param": 0.44993},
            {"kind": "B", "modes": [2, 4], "param": 1.63856},
            {"kind": "B", "modes": [1, 3], "param": 1.50272}
        ],
        "herald": {"scheme": "click", "eta": 1.0, "modes": [3, 4]}
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let f = CircuitFile::from_json(FIG1).unwrap();
        let c = f.circuit().unwrap();
        assert_eq!(c.gates[1].to_string(), "S2(0.44993)[3,4]");
        assert_eq!(f.measurement().unwrap(), BellMeasurement::default());
        let again = CircuitFile::from_json(&f.to_json()).unwrap();
        assert_eq!(again, f);
        let m = BellMeasurement::with_angles([0.1, 1.7], [-0.3, 0.9]);
        let g = CircuitFile::from_circuit(&c, Some(&m)).unwrap();
        let back = CircuitFile::from_json(&g.to_json()).unwrap();
        assert_eq!(back.circuit().unwrap(), c);
        assert_eq!(back.measurement().unwrap(), m);
    }

    #[test]
    fn rejects_unknown_fields_and_versions() {
        let extra = FIG1.replacen("\"n_modes\"", "\"colour\": 3, \"n_modes\"", 1);
        assert!(CircuitFile::from_json(&extra).is_err());
        let v2 = FIG1.replacen("\"format\": 1", "\"format\": 2", 1);
        assert!(CircuitFile::from_json(&v2).is_err());
        let bad_mode = FIG1.replacen("[1, 3]", "[1, 5]", 1);
        assert!(CircuitFile::from_json(&bad_mode).is_err());
        let no_herald = FIG1.replacen(r#""herald": {"scheme": "click", "eta": 1.0, "modes": [3, 4]}"#, r#""note": "x""#, 1);
        assert!(CircuitFile::from_json(&no_herald).is_err());
    }

    #[test]
    fn custom_binning_survives() {
        let b = Binning::new(vec![-0.5, 0.5], vec![1, -1, 1]).unwrap();
        let m = BellMeasurement { bob_binning: b.clone(), ..BellMeasurement::default() };
        let e = MeasurementEntry::from_measurement(&m);
        let text = serde_json::to_string(&e).unwrap();
        assert!(text.contains("\"sign\""));
        let back: MeasurementEntry = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_measurement().unwrap(), m);
    }

    #[test]
    fn csv_round_trip_keeps_digits() {
        let sweep = SweepResult {
            variable: SweepVariable::DistanceKm,
            points: (0..4)
                .map(|i| SweepPoint {
                    x: 0.5 * i as f64,
                    chsh: 2.0 + 1.0 / (3.0 + i as f64),
                    herald_probability: 3.1e-6 / 7.0,
                    params: vec![],
                    angles: [0.0; 4],
                })
                .collect(),
        };
        let text = sweep_to_csv(&sweep).unwrap();
        assert!(text.starts_with("distance_km,chsh,herald_probability\n"));
        let back = sweep_from_csv(&text).unwrap();
        for (a, b) in back.points.iter().zip(&sweep.points) {
            assert!(((a.chsh - b.chsh) / b.chsh).abs() < 1e-13);
            assert!(((a.herald_probability - b.herald_probability) / b.herald_probability).abs() < 1e-13);
        }
        let swapped = text.replacen("1.00000000000000e0", "0.00000000000000e0", 1);
        assert!(sweep_from_csv(&swapped).is_err());
    }
}
