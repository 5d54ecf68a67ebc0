//! Budget-grid parsing for sweeps.

use nrdf_core::{Error, Result};

/// Parse `start:end:count` into a strictly increasing positive list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!(
            "grid must be start:end:count, got `{spec}`"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Parse(format!("bad grid start `{}`", parts[0])))?;
    let end: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Parse(format!("bad grid end `{}`", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad grid count `{}`", parts[2])))?;
    if count == 0 {
        return Err(Error::Parse("grid count must be at least 1".into()));
    }
    if !(start > 0.0) {
        return Err(Error::Parse("grid values must be positive".into()));
    }
    if count == 1 {
        return Ok(vec![start]);
    }
    if !(end > start) {
        return Err(Error::Parse(
            "grid end must exceed start for count > 1".into(),
        ));
    }
    Ok((0..count)
        .map(|k| start + (end - start) * k as f64 / (count - 1) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_linspace() {
        let g = parse_grid("0.1:0.5:5").unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[0] - 0.1).abs() < 1e-15);
        assert!((g[4] - 0.5).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(parse_grid("0.1:0.5").is_err());
        assert!(parse_grid("0:0.5:3").is_err());
        assert!(parse_grid("0.5:0.1:3").is_err());
        assert!(parse_grid("0.1:0.5:0").is_err());
    }

    #[test]
    fn single_point_grid() {
        assert_eq!(parse_grid("0.3:0.3:1").unwrap(), vec![0.3]);
    }
}
