//! Thurston pullback by continuation for point-push surgeries on rational
//! maps, with numerical partial semiconjugacies and expanding metrics.

pub mod metric;
pub mod pullback;
pub mod rational;
pub mod report;
pub mod semiconj;
pub mod sphere;
pub mod surgery;
