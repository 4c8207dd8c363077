"""DP-SGD recommenders, privacy accounting and group-fair re-ranking."""
