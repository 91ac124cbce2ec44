"""Ring-buffer replay storage with prefix reveal and a binary dump format."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DUMP_MAGIC = "FTFL-BUF v1"
_HEADER_RE = re.compile(r"^FTFL-BUF v1 d_s=(\d+) d_a=(\d+) n=(\d+)$")


class DumpFormatError(ValueError):
    """A buffer dump whose bytes do not match its header."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False


@dataclass
class Batch:
    """Column-major view of many transitions, the form every learner consumes."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.terminals[i]))

    def take(self, idx) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.terminals[idx])

    @classmethod
    def concat(cls, parts: list["Batch"]) -> "Batch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("states", "actions", "rewards", "next_states", "terminals")))

    @classmethod
    def from_transitions(cls, items: list[Transition]) -> "Batch":
        return cls(np.array([t.state for t in items], dtype=np.float64),
                   np.array([t.action for t in items], dtype=np.float64),
                   np.array([t.reward for t in items], dtype=np.float64),
                   np.array([t.next_state for t in items], dtype=np.float64),
                   np.array([float(t.terminal) for t in items], dtype=np.float64))


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling.

    When ``revealed_limit`` is set, sampling and :meth:`all` only see the
    first ``revealed_limit`` insertions (pseudo-online probing).
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.revealed_limit: int | None = None

    def __len__(self) -> int:
        return self.size

    @property
    def effective_size(self) -> int:
        return self.size if self.revealed_limit is None else self.revealed_limit

    def _order(self) -> np.ndarray:
        """Storage slots in insertion order (oldest first)."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.ptr + np.arange(self.capacity)) % self.capacity

    def push(self, state, action, reward, next_state, terminal=False) -> None:
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise ValueError(f"state dim mismatch: expected {self.state_dim}")
        if action.shape != (self.action_dim,):
            raise ValueError(f"action dim mismatch: expected {self.action_dim}")
        if not np.isfinite(reward):
            raise ValueError("reward must be finite")
        i = self.ptr
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = float(bool(terminal))
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, t: Transition) -> None:
        self.push(t.state, t.action, t.reward, t.next_state, t.terminal)

    def push_batch(self, batch: Batch) -> None:
        n = len(batch)
        if n == 0:
            return
        if n > self.capacity:
            batch = batch.take(slice(n - self.capacity, n))
            n = self.capacity
        slots = (self.ptr + np.arange(n)) % self.capacity
        self.states[slots] = batch.states
        self.actions[slots] = batch.actions
        self.rewards[slots] = batch.rewards
        self.next_states[slots] = batch.next_states
        self.terminals[slots] = batch.terminals
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.size + n, self.capacity)

    def _slots(self, insertion_idx) -> np.ndarray:
        if self.size < self.capacity:
            return np.asarray(insertion_idx)
        return (self.ptr + np.asarray(insertion_idx)) % self.capacity

    def _gather(self, slots) -> Batch:
        return Batch(self.states[slots], self.actions[slots], self.rewards[slots],
                     self.next_states[slots], self.terminals[slots])

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Insertion indices of ``n`` uniform draws (with replacement)."""
        if self.effective_size < 1:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.effective_size, size=n)

    def sample_batch(self, n: int, rng: np.random.Generator) -> Batch:
        return self._gather(self._slots(self.sample_indices(n, rng)))

    def sample_transitions(self, n: int, rng: np.random.Generator) -> list[Transition]:
        b = self.sample_batch(n, rng)
        return [b[i] for i in range(n)]

    def all(self) -> Batch:
        """Every visible transition, oldest first."""
        return self._gather(self._order()[:self.effective_size])

    def reveal_prefix(self, k: int) -> None:
        k = int(k)
        if k < 1:
            raise ValueError("reveal_prefix needs k >= 1")
        if k > self.size:
            raise ValueError(f"cannot reveal {k} transitions from a buffer of {self.size}")
        if self.revealed_limit is not None and k < self.revealed_limit:
            raise ValueError(f"reveal limit may not shrink ({self.revealed_limit} -> {k})")
        self.revealed_limit = k

    def dump(self, path) -> None:
        write_dump(path, self.all(), self.state_dim, self.action_dim)

    @classmethod
    def load(cls, path, capacity: int | None = None) -> "ReplayBuffer":
        batch, d_s, d_a = read_dump(path)
        buf = cls(capacity or max(len(batch), 1), d_s, d_a)
        buf.push_batch(batch)
        return buf


def write_dump(path, batch: Batch, d_s: int, d_a: int) -> None:
    n = len(batch)
    rows = np.concatenate([batch.states.reshape(n, d_s), batch.actions.reshape(n, d_a),
                           batch.rewards.reshape(n, 1), batch.next_states.reshape(n, d_s),
                           (batch.terminals.reshape(n, 1) != 0).astype(np.float64)], axis=1)
    header = f"{DUMP_MAGIC} d_s={d_s} d_a={d_a} n={n}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rows.astype("<f4").tobytes())


def read_dump(path) -> tuple[Batch, int, int]:
    """Parse a dump file; raises :class:`DumpFormatError` on any structural problem."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DumpFormatError("dump has no header line")
    try:
        header = raw[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise DumpFormatError("dump header is not ASCII") from exc
    m = _HEADER_RE.match(header)
    if not m:
        raise DumpFormatError(f"bad dump header {header!r}")
    d_s, d_a, n = (int(g) for g in m.groups())
    width = 2 * d_s + d_a + 2
    body = raw[nl + 1:]
    if len(body) != n * width * 4:
        raise DumpFormatError(f"dump body has {len(body)} bytes, header promises {n * width * 4}")
    rows = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    term = rows[:, -1]
    if not np.all((term == 0.0) | (term == 1.0)):
        raise DumpFormatError("terminal flags must be 0.0 or 1.0")
    s = rows[:, :d_s]
    a = rows[:, d_s:d_s + d_a]
    r = rows[:, d_s + d_a]
    s2 = rows[:, d_s + d_a + 1:2 * d_s + d_a + 1]
    return Batch(s.copy(), a.copy(), r.copy(), s2.copy(), term.copy()), d_s, d_a
