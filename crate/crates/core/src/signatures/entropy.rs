use super::SignatureError;

/// Shannon entropy (nats) of a probability vector, with `0·ln 0 = 0`.
pub fn posterior_entropy(p: &[f64]) -> Result<f64, SignatureError> {
    if p.is_empty() {
        return Err(SignatureError::NotSimplex("empty".into()));
    }
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(SignatureError::NotSimplex(format!("entry {v}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(SignatureError::NotSimplex(format!("sums to {total}")));
    }
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>())
}
