from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class PlateauHalving:
    """Multiply the lr by ``factor`` whenever the loss stops improving.

    After each evaluation the last ``window`` losses are inspected; if their
    mean is not below the window's first value by more than ``eps`` (relative),
    the rule fires and the history is cleared, which doubles as a cooldown of
    ``window`` evaluations.
    """

    window: int = 5
    eps: float = 1e-4
    factor: float = 0.5
    history: list[float] = field(default_factory=list)
    halvings: int = 0

    def observe(self, loss: float) -> bool:
        self.history.append(float(loss))
        if len(self.history) < self.window:
            return False
        w = self.history[-self.window :]
        ref = w[0]
        if ref - sum(w) / len(w) <= self.eps * abs(ref):
            self.halvings += 1
            self.history.clear()
            return True
        return False

    def apply(self, optimizer) -> None:
        for g in optimizer.param_groups:
            g["lr"] *= self.factor

    def state(self) -> dict:
        return {"history": list(self.history), "halvings": self.halvings}

    def load(self, st: dict) -> None:
        self.history = [float(v) for v in st["history"]]
        self.halvings = int(st["halvings"])
