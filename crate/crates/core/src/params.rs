//! Named parameter collections shared by the language model and the transcoder.

use crate::error::{bail, Result};
use crate::linalg::Scalar;

/// A fixed, ordered set of named dense tensors.
///
/// Gradients and optimizer moments reuse the implementing type, so a
/// gradient set always has the same tensor index as its parameters.
pub trait ParamSet<T: Scalar>: Clone {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, d| d.fill(T::zero()));
        z
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn assign_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _, _| out.push(n.to_string()));
        out
    }

    fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, _, d| s += d.iter().map(|v| v.f64() * v.f64()).sum::<f64>());
        s.sqrt()
    }

    /// First tensor holding a non-finite value.
    fn check_finite(&self) -> Result<()> {
        let mut bad: Option<String> = None;
        self.visit(&mut |n, _, d| {
            if bad.is_none() && d.iter().any(|v| !v.is_finite()) {
                bad = Some(n.to_string());
            }
        });
        if let Some(name) = bad {
            bail!(Numerical, "non-finite value in tensor `{name}`");
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &Self, scale: T) {
        let src = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, _, d| {
            let n = d.len();
            for (a, b) in d.iter_mut().zip(&src[off..off + n]) {
                *a += *b * scale;
            }
            off += n;
        });
    }

    fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v *= s));
    }

    /// Export as `(name, shape, f32 data)` triples for the container format.
    fn to_entries(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, s, d| {
            out.push((n.to_string(), s.to_vec(), d.iter().map(|v| v.f64() as f32).collect()))
        });
        out
    }

    /// Fill from container entries; names and shapes must match exactly.
    fn load_entries(&mut self, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let mut err: Option<String> = None;
        let mut i = 0;
        self.visit_mut(&mut |n, s, d| {
            if err.is_some() {
                return;
            }
            match entries.get(i) {
                Some((en, es, ed)) if en == n && es == s && ed.len() == d.len() => {
                    for (a, b) in d.iter_mut().zip(ed) {
                        *a = T::of(*b as f64);
                    }
                }
                Some((en, es, _)) => {
                    err = Some(format!("tensor {i}: expected `{n}` {s:?}, found `{en}` {es:?}"))
                }
                None => err = Some(format!("missing tensor `{n}`")),
            }
            i += 1;
        });
        if let Some(e) = err {
            bail!(Format, "{e}");
        }
        if i != entries.len() {
            bail!(Format, "container holds {} tensors, expected {i}", entries.len());
        }
        Ok(())
    }
}
