//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! holds values (`Matrix`), tape handles ([`crate::autodiff::Var`]) and
//! gradients. Leaves are visited in declaration order; that order defines
//! the flat layout used by the optimizer and the checkpoint blob.

use crate::Matrix;

/// Uniform access to the matrices of a parameter tree.
pub trait ParamTree {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m| n += m.len());
        n
    }

    /// Parameter values concatenated in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, m| out.extend(m.iter()));
        out
    }

    /// Overwrites every parameter from a flat vector in visit order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |_, m| {
            for v in m.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        });
        assert_eq!(offset, flat.len(), "flat vector length does not match parameter count");
    }

    /// `(name, shape)` for every leaf in visit order.
    fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, m| out.push((name, m.dim())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Declares a parameter struct generic over its leaf type.
///
/// `leaves` are single matrices, `nodes` nested trees and `lists` vectors of
/// nested trees.
macro_rules! param_tree {
    (
        $(#[$meta:meta])*
        $vis:vis struct $name:ident {
            leaves { $($leaf:ident),* $(,)? }
            $(nodes { $($node:ident : $nty:ident),* $(,)? })?
            $(lists { $($list:ident : $lty:ident),* $(,)? })?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<T = $crate::Matrix> {
            $(pub $leaf: T,)*
            $($(pub $node: $nty<T>,)*)?
            $($(pub $list: Vec<$lty<T>>,)*)?
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($($node: self.$node.map(f),)*)?
                    $($($list: self.$list.iter().map(|x| x.map(f)).collect(),)*)?
                }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f($crate::params::join(prefix, stringify!($leaf)), &self.$leaf);)*
                $($(self.$node.visit(&$crate::params::join(prefix, stringify!($node)), f);)*)?
                $($(
                    for (i, item) in self.$list.iter().enumerate() {
                        item.visit(&$crate::params::join(prefix, &format!("{}.{i}", stringify!($list))), f);
                    }
                )*)?
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f($crate::params::join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$node.visit_mut(&$crate::params::join(prefix, stringify!($node)), f);)*)?
                $($(
                    for (i, item) in self.$list.iter_mut().enumerate() {
                        item.visit_mut(&$crate::params::join(prefix, &format!("{}.{i}", stringify!($list))), f);
                    }
                )*)?
            }
        }

        impl $crate::params::ParamTree for $name<$crate::Matrix> {
            fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a $crate::Matrix)) {
                self.visit("", &mut |n, m| f(n, m));
            }

            fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut $crate::Matrix)) {
                self.visit_mut("", &mut |n, m| f(n, m));
            }
        }
    };
}

pub(crate) use param_tree;
