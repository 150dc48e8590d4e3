"""Dataset ingestion, checkpoints, configuration and experiment orchestration."""
