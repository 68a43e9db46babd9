//! Training and evaluation harness. (implementation follows)
