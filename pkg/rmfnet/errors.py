"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A differentiable program was used outside its documented contract."""


class NonFiniteError(FloatingPointError):
    """A forward pass, gradient or loss produced NaN or infinite values."""


class EnumerationBudgetError(ValueError):
    """An exact spectrum enumeration would exceed its term budget."""

    def __init__(self, required: int, budget: int) -> None:
        super().__init__(
            f"Spectrum enumeration needs {required} terms, budget is {budget}"
        )
        self.required = required
        self.budget = budget
