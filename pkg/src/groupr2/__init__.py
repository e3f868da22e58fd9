"""Group-R2 prior for Bayesian linear regression."""
