"""Sliding-window streaming inference.

The engine buffers incoming EMG samples. Once ``W`` samples have arrived,
and then after every further ``E`` samples, it runs the network on the latest
``W`` samples and emits ``E`` joint commands.

Timing conventions
------------------
Window ``k`` covers samples ``[kE, kE + W)``. The decoder state handed to
window ``k + 1`` is the state after step ``E - 1`` of window ``k``, i.e. just
before the first sample of the next window, so the recurrence stays aligned
with the input timeline.

The executed frames are the chunk positions selected by
:func:`executed_slice` (by default the final ``E`` positions, those aligned
with the newest inputs). Commands are integrated from the last emitted
command with the chunk's velocities at those positions, so consecutive
commands differ by exactly one decoder velocity (before the limit clamp).
For the first inference the integration starts from the chunk pose just
before the selected positions, which reproduces the chunk itself.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import net
from .exceptions import StateError, ValidationError

ALIGNMENTS = ("newest", "initial")


@dataclass
class StreamConfig:
    window: int = 400
    execute: int = 20
    realtime: bool = False
    rate: float = 500.0
    alignment: str = "newest"

    def validate(self, params=None):
        if not 1 <= self.execute <= self.window:
            raise ValidationError("execute must satisfy 1 <= E <= W")
        if self.rate <= 0:
            raise ValidationError("rate must be positive")
        if self.alignment not in ALIGNMENTS:
            raise ValidationError(f"alignment must be one of {ALIGNMENTS}")
        if params is not None and self.window != params.config.chunk_len:
            raise ValidationError(
                f"window {self.window} does not match the network's trained window "
                f"{params.config.chunk_len}"
            )
        return self

    @property
    def budget_us(self):
        """Time available per chunk: ``E / rate``."""
        return 1e6 * self.execute / self.rate


def executed_slice(window, execute, alignment="newest"):
    """Chunk positions that become commands."""
    if alignment == "newest":
        return slice(window - execute, window)
    if alignment == "initial":
        return slice(0, execute)
    raise ValidationError(f"unknown alignment {alignment!r}")


@dataclass
class LatencyStats:
    chunks: int = 0
    min_us: float = None
    mean_us: float = None
    p95_us: float = None
    max_us: float = None
    delay_mean_us: float = None
    delay_max_us: float = None
    budget_us: float = None
    deadline_misses: int = None
    realtime: bool = False

    @property
    def empty(self):
        return self.chunks == 0

    def to_dict(self):
        return asdict(self)


class StreamingEngine:
    """Sliding-window inference over a sample stream.

    Parameters
    ----------
    params : NetworkParams, optional
        Network to run. An engine built without parameters must be given
        them through :meth:`initialize` before samples are pushed.
    config : StreamConfig, optional
    clock : callable, optional
        Monotonic clock in seconds, used for latency accounting only.
    """

    def __init__(self, params=None, config=None, clock=time.perf_counter):
        self.clock = clock
        self.params = None
        self.config = None
        if params is not None:
            self.initialize(params, config)

    def initialize(self, params, config=None):
        params.validate()
        self.config = (config or StreamConfig(window=params.config.chunk_len)).validate(params)
        self.params = params
        self.reset()
        return self

    def reset(self):
        """Forget buffered samples, decoder state and statistics."""
        W = self.config.window
        self._window = np.zeros((self.params.config.in_channels, W))
        self.n_samples = 0
        self.state = net.DecoderState.fresh(self.params)
        self.last_command = None
        self.infer_us = []
        self.delay_us = []
        self.n_emitted = 0

    @property
    def initialized(self):
        return self.params is not None

    def _next_trigger(self):
        W, E = self.config.window, self.config.execute
        if self.n_samples < W:
            return W
        return self.n_samples + E - (self.n_samples - W) % E

    def _append(self, block):
        k = block.shape[1]
        W = self.config.window
        if k >= W:
            self._window[:] = block[:, -W:]
        else:
            self._window[:, :-k] = self._window[:, k:]
            self._window[:, -k:] = block
        self.n_samples += k

    def push_samples(self, samples):
        """Buffer ``(8, n)`` samples; return the ``(22, m)`` commands emitted."""
        if not self.initialized:
            raise StateError("engine is not initialized; call initialize(params, config)")
        samples = np.asarray(samples, dtype=float)
        C = self.params.config.in_channels
        if samples.ndim == 1 and samples.shape[0] == C:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] != C:
            raise ValidationError(f"samples must have shape ({C}, n)")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("samples must be finite")
        arrival = self.clock()
        out = []
        pos = 0
        n = samples.shape[1]
        while pos < n:
            take = min(self._next_trigger() - self.n_samples, n - pos)
            self._append(samples[:, pos : pos + take])
            pos += take
            if self.n_samples == self._next_trigger_at(self.n_samples):
                out.append(self._infer(arrival))
        D = self.params.config.out_dof
        return np.concatenate(out, axis=1) if out else np.zeros((D, 0))

    def _next_trigger_at(self, n):
        W, E = self.config.window, self.config.execute
        if n >= W and (n - W) % E == 0:
            return n
        return -1

    def _infer(self, arrival):
        cfg, P = self.config, self.params
        t0 = self.clock()
        chunk, vel, carried = net.run_model(P, self._window, self.state, carry_index=cfg.execute - 1)
        sel = executed_slice(cfg.window, cfg.execute, cfg.alignment)
        if self.last_command is None:
            prev = self.state.last_pose if sel.start == 0 else chunk[:, sel.start - 1]
        else:
            prev = self.last_command
        commands = integrate(prev, vel[:, sel], P["limit_lo"], P["limit_hi"], P.config.clamp_output)
        t1 = self.clock()
        self.state = carried
        self.last_command = commands[:, -1].copy()
        self.infer_us.append(1e6 * (t1 - t0))
        self.delay_us.append(1e6 * (t1 - arrival))
        self.n_emitted += commands.shape[1]
        return commands

    @property
    def chunks(self):
        return len(self.infer_us)


def integrate(prev, velocities, lo, hi, clamp=True):
    """Accumulate ``(22, n)`` per-step velocities from ``prev`` with the limit clamp."""
    out = np.empty_like(velocities)
    theta = np.asarray(prev, dtype=float)
    for j in range(velocities.shape[1]):
        theta = theta + velocities[:, j]
        if clamp:
            theta = np.minimum(np.maximum(theta, lo), hi)
        out[:, j] = theta
    return out


def expected_emissions(n_samples, window, execute):
    """Commands emitted for an ``n_samples`` stream."""
    if n_samples < window:
        return 0
    return (n_samples - window) // execute * execute + execute


def latency_stats(engine):
    """Summary of per-chunk inference time; an empty marker before any chunk."""
    if engine.chunks == 0:
        return LatencyStats(realtime=bool(engine.config and engine.config.realtime))
    t = np.asarray(engine.infer_us)
    d = np.asarray(engine.delay_us)
    budget = engine.config.budget_us
    return LatencyStats(
        chunks=len(t),
        min_us=float(t.min()),
        mean_us=float(t.mean()),
        p95_us=float(np.percentile(t, 95)),
        max_us=float(t.max()),
        delay_mean_us=float(d.mean()),
        delay_max_us=float(d.max()),
        budget_us=budget,
        deadline_misses=int((t > budget).sum()),
        realtime=engine.config.realtime,
    )


def replay(engine, emg, block=None, realtime=None):
    """Feed an ``(8, N)`` array through ``engine`` in blocks of ``block``
    samples (default ``E``); returns all emitted commands.

    In realtime mode each block is released no earlier than its wall-clock
    arrival time at ``config.rate``; late chunks are still emitted.
    """
    cfg = engine.config
    block = block or cfg.execute
    realtime = cfg.realtime if realtime is None else realtime
    out = []
    start = time.perf_counter()
    for pos in range(0, emg.shape[1], block):
        if realtime:
            due = start + (pos + block) / cfg.rate
            wait = due - time.perf_counter()
            if wait > 0:
                time.sleep(wait)
        out.append(engine.push_samples(emg[:, pos : pos + block]))
    D = engine.params.config.out_dof
    return np.concatenate(out, axis=1) if out else np.zeros((D, 0))


class StreamWorker:
    """Runs an engine on a dedicated thread between two queues.

    The producer calls :meth:`put` with sample blocks; the consumer reads
    ``(22, m)`` command blocks from :meth:`get` in order. Output values are
    identical to calling ``push_samples`` directly.
    """

    _STOP = object()

    def __init__(self, engine, maxsize=0):
        self.engine = engine
        self.inbox = queue.Queue(maxsize)
        self.outbox = queue.Queue()
        self.error = None
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        while True:
            item = self.inbox.get()
            if item is self._STOP:
                self.outbox.put(self._STOP)
                return
            try:
                out = self.engine.push_samples(item)
            except Exception as exc:  # handed to the consumer
                self.error = exc
                self.outbox.put(self._STOP)
                return
            if out.shape[1]:
                self.outbox.put(out)

    def put(self, samples):
        self.inbox.put(np.array(samples, dtype=float))

    def close(self):
        """Signal end of input and return every remaining command block, concatenated."""
        self.inbox.put(self._STOP)
        blocks = []
        while True:
            item = self.outbox.get()
            if item is self._STOP:
                break
            blocks.append(item)
        self._thread.join()
        if self.error is not None:
            raise self.error
        D = self.engine.params.config.out_dof
        return np.concatenate(blocks, axis=1) if blocks else np.zeros((D, 0))


# ----------------------------------------------------------------------------
# wrist increments


@dataclass
class WristPose:
    """Position in meters and orientation as a unit quaternion ``(w, x, y, z)``."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.orientation = np.asarray(self.orientation, dtype=float)
        if self.position.shape != (3,) or self.orientation.shape != (4,):
            raise ValidationError("position must be a 3-vector and orientation a 4-vector")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.orientation))):
            raise ValidationError("wrist pose must be finite")
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise ValidationError("orientation must be a unit quaternion (norm 1 within 1e-9)")

    @property
    def rotation(self):
        return Rotation.from_quat(self.orientation, scalar_first=True)


def _quat(rot):
    return rot.as_quat(canonical=False, scalar_first=True)


def wrist_increment(prev, curr):
    """Pose of ``curr`` expressed in the frame of ``prev``: ``prev^-1 * curr``."""
    r_prev = prev.rotation
    rot = r_prev.inv() * curr.rotation
    pos = r_prev.inv().apply(curr.position - prev.position)
    return WristPose(pos, _quat(rot))


def compose(base, delta):
    """Apply an increment: ``base * delta``."""
    r_base = base.rotation
    return WristPose(base.position + r_base.apply(delta.position), _quat(r_base * delta.rotation))
