//! Sliding `(context, target)` windows.

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window<'a> {
    pub start: usize,
    pub context: &'a [f64],
    pub target: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet<'a> {
    pub windows: Vec<Window<'a>>,
    /// The series was shorter than `context + horizon`.
    pub too_short: bool,
}

/// `floor((len - L - H) / stride) + 1` windows starting at `0, stride, ...`.
pub fn make_windows(
    values: &[f64],
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet<'_>> {
    if stride == 0 || context == 0 || horizon == 0 {
        return invalid("context, horizon and stride must be >= 1");
    }
    let need = context + horizon;
    if values.len() < need {
        return Ok(WindowSet {
            windows: Vec::new(),
            too_short: true,
        });
    }
    let windows = (0..=values.len() - need)
        .step_by(stride)
        .map(|s| Window {
            start: s,
            context: &values[s..s + context],
            target: &values[s + context..s + need],
        })
        .collect();
    Ok(WindowSet {
        windows,
        too_short: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let v = vec![0.0; 200];
        assert_eq!(make_windows(&v, 128, 60, 1).unwrap().windows.len(), 13);
        assert_eq!(
            make_windows(&v[..188], 128, 60, 1).unwrap().windows.len(),
            1
        );
        assert_eq!(make_windows(&v, 128, 60, 200).unwrap().windows.len(), 1);
        let short = make_windows(&v[..100], 128, 60, 1).unwrap();
        assert!(short.too_short && short.windows.is_empty());
        assert!(make_windows(&v, 128, 60, 0).is_err());
    }

    #[test]
    fn window_contents() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let w = make_windows(&v, 3, 2, 4).unwrap().windows;
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].context, &[4.0, 5.0, 6.0]);
        assert_eq!(w[1].target, &[7.0, 8.0]);
    }

    proptest! {
        #[test]
        fn count_formula(len in 0usize..300, l in 1usize..50, h in 1usize..50, stride in 1usize..40) {
            let v = vec![0.0; len];
            let n = make_windows(&v, l, h, stride).unwrap().windows.len();
            let expected = if len < l + h { 0 } else { (len - l - h) / stride + 1 };
            prop_assert_eq!(n, expected);
        }
    }
}
