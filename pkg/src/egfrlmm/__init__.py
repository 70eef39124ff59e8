"""Next-visit eGFR forecasting with multimodal model prompts, ensembles and tabular baselines."""

__version__ = "0.1.0"
