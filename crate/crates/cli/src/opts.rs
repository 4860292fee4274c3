//! Value parsers shared by the subcommands.

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskKind {
    Topleft,
    Blob,
}

fn parse_list(s: &str, want: usize) -> Result<Vec<usize>, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != want {
        return Err(format!("expected {want} comma-separated integers, got {}", v.len()));
    }
    if v.contains(&0) {
        return Err("extents must be positive".into());
    }
    Ok(v)
}

/// `h,w`
pub fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let v = parse_list(s, 2)?;
    Ok((v[0], v[1]))
}

/// `n,h,w`
pub fn parse_dims3(s: &str) -> Result<(usize, usize, usize), String> {
    let v = parse_list(s, 3)?;
    Ok((v[0], v[1], v[2]))
}

/// `n,h,w,c`
pub fn parse_dims4(s: &str) -> Result<(usize, usize, usize, usize), String> {
    let v = parse_list(s, 4)?;
    Ok((v[0], v[1], v[2], v[3]))
}

/// One block size: `b` is the square `b x b`, `hxw` is rectangular.
pub fn parse_candidate(p: &str) -> Result<(usize, usize), String> {
    let p = p.trim();
    let (h, w) = p.split_once('x').unwrap_or((p, p));
    let h = h.parse::<usize>().map_err(|e| format!("`{p}`: {e}"))?;
    let w = w.parse::<usize>().map_err(|e| format!("`{p}`: {e}"))?;
    if h == 0 || w == 0 {
        return Err(format!("`{p}`: block extents must be positive"));
    }
    Ok((h, w))
}

pub fn parse_sparsity(p: &str) -> Result<f64, String> {
    let v = p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("sparsity {v} outside [0, 1]"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists() {
        assert_eq!(parse_hw("16,24"), Ok((16, 24)));
        assert!(parse_hw("16").is_err());
        assert!(parse_hw("0,4").is_err());
        assert_eq!(parse_dims4("1, 8,8,2"), Ok((1, 8, 8, 2)));
        assert_eq!(parse_candidate("8"), Ok((8, 8)));
        assert_eq!(parse_candidate("16x24"), Ok((16, 24)));
        assert!(parse_candidate("x").is_err());
        assert_eq!(parse_sparsity("0.5"), Ok(0.5));
        assert!(parse_sparsity("1.2").is_err());
    }
}
