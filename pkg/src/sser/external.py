"""Limit-state evaluation through an external child process.

Line protocol over the child's standard streams, documented bit-exactly in
the README:

  handshake   parent: ``PING``            child: ``PONG``
  batch       parent: ``EVAL n M`` then n lines of M space-separated decimals
              child:  n lines, one decimal each
  shutdown    parent: ``QUIT``            child exits

Any malformed or non-finite reply aborts the study with batch context.  The
protocol is stateless between batches.
"""

from __future__ import annotations

import math
import select
import shlex
import subprocess

import numpy as np


class ProtocolError(RuntimeError):
    """External limit-state child misbehaved (timeout, bad reply, exit)."""


class ExternalLsf:
    """Batched evaluator backed by a child process, usable as the limit-state
    callable of a reliability problem."""

    def __init__(self, command, timeout: float = 60.0, batch_size: int = 1024):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.batch_size = batch_size
        self._proc: subprocess.Popen | None = None

    # -- lifecycle

    def start(self) -> None:
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot start external limit state {self.command}: {exc}") from exc
        self._send("PING")
        reply = self._read_line("handshake")
        if reply.strip() != "PONG":
            self.close()
            raise ProtocolError(f"handshake failed: expected PONG, got {reply!r}")

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            if self._proc.poll() is None:
                self._send("QUIT")
                self._proc.wait(timeout=5.0)
        except (ProtocolError, subprocess.TimeoutExpired):
            self._proc.kill()
        finally:
            self._proc = None

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()

    # -- wire helpers

    def _send(self, line: str) -> None:
        proc = self._proc
        if proc is None or proc.poll() is not None:
            raise ProtocolError("external limit-state child is not running")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ProtocolError(f"child closed its input: {exc}") from exc

    def _read_line(self, context: str) -> str:
        proc = self._proc
        ready, _, _ = select.select([proc.stdout], [], [], self.timeout)
        if not ready:
            raise ProtocolError(f"timeout waiting for child reply ({context})")
        line = proc.stdout.readline()
        if line == "":
            raise ProtocolError(f"child exited during {context} (status {proc.poll()})")
        return line

    # -- evaluation

    def evaluate(self, x) -> np.ndarray:
        """Evaluate a batch of points, transparently split into sub-batches."""
        if self._proc is None:
            self.start()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x))
        for start in range(0, len(x), self.batch_size):
            sl = slice(start, min(start + self.batch_size, len(x)))
            out[sl] = self._evaluate_batch(x[sl])
        return out

    def _evaluate_batch(self, x: np.ndarray) -> np.ndarray:
        n, m = x.shape
        self._send(f"EVAL {n} {m}")
        for row in x:
            self._send(" ".join(repr(v) for v in row))
        vals = np.empty(n)
        for i in range(n):
            line = self._read_line(f"batch of {n}, reply {i + 1}")
            parts = line.split()
            if len(parts) != 1:
                raise ProtocolError(
                    f"malformed reply line {i + 1}/{n}: {line.rstrip()!r} (expected one decimal)"
                )
            try:
                vals[i] = float(parts[0])
            except ValueError as exc:
                raise ProtocolError(f"unparseable reply line {i + 1}/{n}: {line.rstrip()!r}") from exc
            if not math.isfinite(vals[i]):
                raise ProtocolError(f"non-finite limit-state value in reply {i + 1}/{n}")
        return vals

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)
