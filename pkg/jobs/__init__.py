"""RQ job modules."""
