//! Supervised comparison classifiers trained only on the labeled subset.

pub mod knn;
pub mod mlp;
pub mod tree;

pub use knn::{knn_fit, knn_predict, KnnModel, MAX_K};
pub use mlp::{train_mlp, train_mlp_observed};
pub use tree::{tree_fit, tree_predict, DecisionTree, TreeNode};
