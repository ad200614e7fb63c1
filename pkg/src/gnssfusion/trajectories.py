"""Analytic receiver trajectories for the scenario simulator.

All trajectories are expressed in the scenario's local world frame and are
normalized so the platform starts at the origin with identity attitude:
the local frame IS the start pose frame. Positions are C^2 in time (quintic
speed ramps), which the IMU generator requires.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .so3 import rot_z


def _smoothstep(x: np.ndarray) -> np.ndarray:
    """Quintic smoothstep: 0 -> 1 with zero first/second derivatives at ends."""
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10.0 - 15.0 * x + 6.0 * x**2)


def _smoothstep_d(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return 30.0 * x**2 * (1.0 - x) ** 2


def _smoothstep_int(x: np.ndarray) -> np.ndarray:
    """Integral of the quintic smoothstep from 0 to x (x clipped to [0, 1])."""
    x = np.clip(x, 0.0, 1.0)
    return 2.5 * x**4 - 3.0 * x**5 + x**6


class Trajectory:
    """Interface: position/velocity/acceleration in W, attitude and body rate."""

    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def acceleration(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def attitude(self, t: float) -> np.ndarray:
        return np.eye(3)

    def body_rate(self, t: float) -> np.ndarray:
        return np.zeros(3)


class StaticTrajectory(Trajectory):
    def position(self, t):
        return np.zeros(3)

    def velocity(self, t):
        return np.zeros(3)

    def acceleration(self, t):
        return np.zeros(3)


class LineTrajectory(Trajectory):
    """Straight drive along local +x with a smooth speed ramp."""

    def __init__(self, speed: float = 5.0, start_delay: float = 2.0, ramp: float = 3.0):
        if speed < 0 or ramp <= 0:
            raise ConfigError("line trajectory needs speed >= 0 and ramp > 0")
        self.speed = speed
        self.t0 = start_delay
        self.ramp = ramp

    def _s(self, t):
        # distance travelled
        u = (t - self.t0) / self.ramp
        if t <= self.t0:
            return 0.0
        if u <= 1.0:
            return self.speed * self.ramp * float(_smoothstep_int(u))
        return self.speed * (self.ramp * float(_smoothstep_int(1.0)) + (t - self.t0 - self.ramp))

    def position(self, t):
        return np.array([self._s(t), 0.0, 0.0])

    def velocity(self, t):
        u = (t - self.t0) / self.ramp
        v = self.speed * float(_smoothstep(u)) if t > self.t0 else 0.0
        return np.array([v, 0.0, 0.0])

    def acceleration(self, t):
        u = (t - self.t0) / self.ramp
        a = self.speed * float(_smoothstep_d(u)) / self.ramp if self.t0 < t < self.t0 + self.ramp else 0.0
        return np.array([a, 0.0, 0.0])


class CircleTrajectory(Trajectory):
    """Counterclockwise circle entered at the origin heading +x.

    The yaw follows the heading, so the gyro sees the turn rate. The angular
    speed ramps smoothly from rest after ``start_delay``.
    """

    def __init__(self, radius: float = 50.0, speed: float = 5.0,
                 start_delay: float = 2.0, ramp: float = 3.0):
        if radius <= 0 or speed <= 0 or ramp <= 0:
            raise ConfigError("circle trajectory needs positive radius/speed/ramp")
        self.radius = radius
        self.omega = speed / radius
        self.t0 = start_delay
        self.ramp = ramp

    def _theta(self, t):
        if t <= self.t0:
            return 0.0, 0.0, 0.0
        u = (t - self.t0) / self.ramp
        if u <= 1.0:
            th = self.omega * self.ramp * float(_smoothstep_int(u))
            w = self.omega * float(_smoothstep(u))
            wd = self.omega * float(_smoothstep_d(u)) / self.ramp
        else:
            th = self.omega * (self.ramp * float(_smoothstep_int(1.0)) + (t - self.t0 - self.ramp))
            w = self.omega
            wd = 0.0
        return th, w, wd

    def position(self, t):
        th, _, _ = self._theta(t)
        return self.radius * np.array([np.sin(th), 1.0 - np.cos(th), 0.0])

    def velocity(self, t):
        th, w, _ = self._theta(t)
        return self.radius * w * np.array([np.cos(th), np.sin(th), 0.0])

    def acceleration(self, t):
        th, w, wd = self._theta(t)
        return (self.radius * wd * np.array([np.cos(th), np.sin(th), 0.0])
                + self.radius * w * w * np.array([-np.sin(th), np.cos(th), 0.0]))

    def attitude(self, t):
        th, _, _ = self._theta(t)
        return rot_z(th)

    def body_rate(self, t):
        _, w, _ = self._theta(t)
        return np.array([0.0, 0.0, w])


class WaypointTrajectory(Trajectory):
    """Cubic spline through timed waypoints; attitude stays identity."""

    def __init__(self, times: list[float], points: list[list[float]]):
        from scipy.interpolate import CubicSpline

        times = np.asarray(times, dtype=float)
        pts = np.asarray(points, dtype=float)
        if len(times) < 3 or pts.shape != (len(times), 3):
            raise ConfigError("waypoints need >= 3 timed 3D points")
        pts = pts - pts[0]
        self._spline = CubicSpline(times, pts, bc_type="clamped")
        self._t_min, self._t_max = float(times[0]), float(times[-1])

    def _clamp(self, t):
        return min(max(t, self._t_min), self._t_max)

    def position(self, t):
        return np.asarray(self._spline(self._clamp(t)))

    def velocity(self, t):
        t = self._clamp(t)
        return np.asarray(self._spline(t, 1))

    def acceleration(self, t):
        t = self._clamp(t)
        return np.asarray(self._spline(t, 2))


def make_trajectory(spec: dict) -> Trajectory:
    kind = spec.get("kind", "static")
    args = {k: v for k, v in spec.items() if k != "kind"}
    try:
        if kind == "static":
            return StaticTrajectory()
        if kind == "line":
            return LineTrajectory(**args)
        if kind == "circle":
            return CircleTrajectory(**args)
        if kind == "waypoints":
            return WaypointTrajectory(**args)
    except TypeError as ex:
        raise ConfigError(f"bad trajectory parameters for kind {kind!r}: {ex}") from ex
    raise ConfigError(f"unknown trajectory kind {kind!r}")
