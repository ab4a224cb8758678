"""Supporting services shared by the pipeline and background workers."""
