//! Dataset ingestion and synthetic data. (implementation follows)
