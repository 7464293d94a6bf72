// Acceptance suite — populated as the pipeline comes together.
