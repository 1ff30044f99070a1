//! Merged accuracy-per-epoch CSV for external plotting.

use crate::embedding::FusionStrategy;
use crate::probe::TrainTrace;

use super::HarnessError;

/// One row per epoch: `epoch,<strategy>,<strategy>,...` with the test
/// accuracy of each trace. Values are printed in shortest round-trip form,
/// so parsing the CSV recovers the trace values bit-for-bit.
pub fn emit_curves(traces: &[(FusionStrategy, &TrainTrace)]) -> Result<String, HarnessError> {
    let Some((_, first)) = traces.first() else {
        return Err(HarnessError::InvalidConfig("no traces to merge".into()));
    };
    let epochs = first.records.len();
    if let Some((s, t)) = traces.iter().find(|(_, t)| t.records.len() != epochs) {
        return Err(HarnessError::EpochMismatch {
            strategy: *s,
            expected: epochs,
            actual: t.records.len(),
        });
    }
    let mut out = String::from("epoch");
    for (s, _) in traces {
        out.push(',');
        out.push_str(s.as_str());
    }
    out.push('\n');
    for row in 0..epochs {
        out.push_str(&first.records[row].epoch.to_string());
        for (_, t) in traces {
            out.push(',');
            out.push_str(&t.records[row].test_accuracy.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::EpochRecord;

    fn trace(epochs: usize, offset: f64) -> TrainTrace {
        TrainTrace {
            records: (1..=epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    test_accuracy: (e as f64 / (epochs as f64 + offset)).min(1.0),
                })
                .collect(),
        }
    }

    #[test]
    fn two_traces_give_three_columns() {
        let (a, b) = (trace(500, 1.0), trace(500, 3.0));
        let csv = emit_curves(&[(FusionStrategy::ImageOnly, &a), (FusionStrategy::Concat, &b)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,IMAGE_ONLY,CONCAT");
        assert_eq!(lines.len(), 501);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn single_trace_two_columns() {
        let a = trace(3, 0.0);
        let csv = emit_curves(&[(FusionStrategy::Mean, &a)]).unwrap();
        assert!(csv.lines().all(|l| l.split(',').count() == 2));
    }

    #[test]
    fn values_echo_bit_exactly() {
        let (a, b) = (trace(50, 7.0), trace(50, 0.3));
        let csv = emit_curves(&[(FusionStrategy::TextOnly, &a), (FusionStrategy::Mean, &b)]).unwrap();
        for (i, line) in csv.lines().skip(1).enumerate() {
            let cols: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(cols[0].to_bits(), a.records[i].test_accuracy.to_bits());
            assert_eq!(cols[1].to_bits(), b.records[i].test_accuracy.to_bits());
        }
    }

    #[test]
    fn mismatched_epochs_rejected() {
        let (a, b) = (trace(5, 0.0), trace(6, 0.0));
        assert!(matches!(
            emit_curves(&[(FusionStrategy::ImageOnly, &a), (FusionStrategy::Concat, &b)]),
            Err(HarnessError::EpochMismatch { expected: 5, actual: 6, .. })
        ));
    }
}
