//! Block-structured networks: teachers, the group-stack generator, the dual
//! generator (TargetNet), filters, discriminator assembly and regrouping.

pub mod arch;
pub mod discriminator;
pub mod filters;
pub mod generator;
pub mod layers;
pub mod regrouped;
pub mod target;
pub mod teacher;

use std::hash::{DefaultHasher, Hasher};

pub use arch::ArchSpec;
pub use discriminator::{
    assemble_discriminator, assemble_dual_discriminator, discriminator_blocks, dual_discriminator_blocks,
    Discriminator,
};
pub use filters::{FilterBank, TaskFilter, TeacherFilter};
pub use generator::GeneratorStack;
pub use layers::{Block, Conv, Dense, Direction, Layer};
pub use regrouped::{Branch, RegroupedNet};
pub use target::TargetNet;
pub use teacher::{Head, TeacherNet};

use crate::autodiff::Param;
use crate::tensor::Element;

/// Anything that owns parameters in a stable, named order.
///
/// The visit order is part of the checkpoint format.
pub trait Module<T: Element> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Hash of every parameter name, shape and bit pattern.
    fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit_params("", &mut |name, p| {
            h.write(name.as_bytes());
            for &d in p.value.shape() {
                h.write_usize(d);
            }
            for &v in p.value.data() {
                h.write_u64(v.bits());
            }
        });
        h.finish()
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

/// Joins a parameter path segment onto a prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
