//! Named traversal of learnable tensors.
//!
//! Gradients share the weight types, so one traversal gives flattening,
//! optimizer updates, checkpoint I/O and per-group gradient checks.

use ndarray::{Array1, Array2};

pub trait Parameters {
    #[allow(clippy::type_complexity)]
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrite every tensor from a flat vector produced by [`Parameters::to_flat`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, offset, len)` for every tensor, in flat order.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        self.visit("", &mut |name, _, v| {
            out.push((name.to_string(), offset, v.len()));
            offset += v.len();
        });
        out
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, v| v.fill(0.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

impl Parameters for Array2<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, self.shape(), self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[doc(hidden)]
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::model::params::Parameters for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( self.$field.visit(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
                $( self.$field.visit_mut(&$crate::model::params::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// `a += b` over two parameter sets of identical layout.
pub fn add_assign<P: Parameters>(a: &mut P, b: &P) {
    let flat = b.to_flat();
    let mut offset = 0;
    a.visit_mut("", &mut |_, v| {
        let n = v.len();
        for (x, y) in v.iter_mut().zip(&flat[offset..offset + n]) {
            *x += y;
        }
        offset += n;
    });
}
