"""Estimation core: likelihood fits, policy solver, standardisation, sandwich variance and the analysis pipeline."""
