//! Direction classifiers: the kernel-capable random forest and the
//! multinomial logistic baseline.

pub mod forest;
pub mod logistic;

pub use forest::{fit_forest, forest_predict, ForestModel, ForestParams};
pub use logistic::{fit_logistic, LogisticModel, LogisticParams, LogisticReport};
