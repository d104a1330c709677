"""Exception types shared across the package."""


class FedMarketError(Exception):
    """Base class for all package-specific errors."""


class ContractError(FedMarketError):
    """A caller violated an operation's documented precondition."""


class BatchNormBatchError(ContractError):
    """Train-mode BatchNorm forward was given a batch of size <= 1."""


class DegenerateLogitsError(ContractError):
    """An all-zero logits matrix cannot be direction-normalized."""


class DataFormatError(FedMarketError):
    """A dataset file failed to parse; message carries location info."""


class ConfigError(FedMarketError):
    """Invalid experiment configuration; collects every problem found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
