//! Parsers for the compact list arguments.

use wnsf::ModelOrders;

/// `m_f,m_l,m_c,m_d`.
pub fn parse_orders(s: &str) -> Result<ModelOrders, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad order `{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match parts[..] {
        [f, l, c, d] => Ok(ModelOrders::new(f, l, c, d)),
        _ => Err(format!("expected four comma-separated orders m_f,m_l,m_c,m_d, got `{s}`")),
    }
}

/// ARX order grid given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<usize>);

/// Either `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("bad grid value `{p}`: {e}"));
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let (start, stop, step) = match parts[..] {
            [a, b] => (num(a)?, num(b)?, 1),
            [a, b, c] => (num(a)?, num(b)?, num(c)?),
            _ => return Err(format!("range must be start:stop[:step], got `{s}`")),
        };
        if step == 0 || start > stop {
            return Err(format!("empty range `{s}`"));
        }
        return Ok(Grid((start..=stop).step_by(step).collect()));
    }
    let mut grid = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
    grid.sort_unstable();
    grid.dedup();
    Ok(Grid(grid))
}
