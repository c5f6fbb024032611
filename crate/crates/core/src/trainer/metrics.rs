use std::io::Write;

/// Column header of the metrics CSV.
pub const CSV_HEADER: &str =
    "iter,obj_return,util_return,peak_violation_rate,consensus_gap,mean_lambda,wall_ms";

/// What one iteration of training looked like across the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Mean over agents of the batch estimate of each agent's discounted reward return.
    pub objective_return: f64,
    /// Same for the raw (not peak-augmented) utility.
    pub utility_return: f64,
    /// Fraction of sampled steps, over all agents, whose peak value fell below threshold.
    pub peak_violation_rate: f64,
    /// Gap of the parameters produced by this iteration.
    pub consensus_gap: f64,
    pub mean_lambda: f64,
    /// Every agent's dual variable after this iteration.
    pub lambdas: Vec<f64>,
    pub wall_ms: f64,
}

/// Formats with 9 significant digits, switching to exponent notation for
/// very large or small magnitudes.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, x);
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{exp}")
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.iteration,
            format_sig9(r.objective_return),
            format_sig9(r.utility_return),
            format_sig9(r.peak_violation_rate),
            format_sig9(r.consensus_gap),
            format_sig9(r.mean_lambda),
            format_sig9(r.wall_ms),
        )?;
    }
    Ok(())
}
