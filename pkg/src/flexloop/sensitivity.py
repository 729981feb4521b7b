"""Steady-state input-output sensitivities of the grid.

The controller needs one piece of model information: how a change in each
controllable (P, Q) setpoint moves the monitored bus voltages and the active
power exchanged at the PCC. The map is extracted once from the power-flow
model by central finite differences around an operating point and then held
fixed; the feedback loop tolerates the resulting model mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DeviceSet, NetworkModel, add_setpoint_injections, base_injections
from .powerflow import solve_power_flow

DEFAULT_STEP_PU = 1e-4


class SensitivityError(RuntimeError):
    """A perturbed power flow required for a sensitivity column failed."""


@dataclass(frozen=True)
class SensitivityMatrix:
    """Linear response of (bus voltages, PCC power) to setpoint changes.

    ``dv`` has one row per monitored bus and one column per setpoint entry,
    in p.u. voltage per p.u. power; ``dpcc`` is the PCC-power row in p.u.
    per p.u. The operating point the map was linearized at is kept for
    bookkeeping and re-linearization decisions.
    """

    dv: np.ndarray
    dpcc: np.ndarray
    monitored_buses: tuple[int, ...]
    operating_point: np.ndarray
    step_pu: float

    @property
    def n_setpoints(self) -> int:
        return self.dpcc.shape[0]

    def combined(self) -> np.ndarray:
        """Voltage rows stacked on top of the PCC row."""
        return np.vstack([self.dv, self.dpcc[None, :]])

    def scaled(self, factors_v: np.ndarray, factors_pcc: np.ndarray) -> "SensitivityMatrix":
        """Entry-wise scaled copy, used for model-mismatch studies."""
        return SensitivityMatrix(
            dv=self.dv * factors_v,
            dpcc=self.dpcc * factors_pcc,
            monitored_buses=self.monitored_buses,
            operating_point=self.operating_point,
            step_pu=self.step_pu,
        )


def compute_sensitivity(
    net: NetworkModel,
    devices: DeviceSet,
    u0: np.ndarray,
    *,
    step_pu: float = DEFAULT_STEP_PU,
    slack_v: float = 1.0,
    monitored: tuple[int, ...] | None = None,
) -> SensitivityMatrix:
    """Central finite-difference sensitivities around setpoint vector ``u0``.

    Each setpoint entry is perturbed by ``+/- step_pu`` on top of the static
    loads and legacy feed-in; both perturbed power flows must converge,
    otherwise the offending column is named in the raised error.
    """
    u0 = np.asarray(u0, dtype=float)
    p = devices.n_setpoints
    if u0.shape != (p,):
        raise ValueError(f"operating point must have shape ({p},), got {u0.shape}")
    if monitored is None:
        monitored = net.pq_ids
    rows = [net.pq_row(b) + 1 for b in monitored]  # rows into full v_mag

    base = base_injections(net, devices)
    ref = solve_power_flow(net, add_setpoint_injections(base, net, devices, u0), slack_v)
    if not ref.converged:
        raise SensitivityError("power flow does not converge at the operating point")

    dv = np.zeros((len(monitored), p))
    dpcc = np.zeros(p)
    for j in range(p):
        label = devices.setpoint_labels[j]
        responses = []
        for sign in (+1.0, -1.0):
            u = u0.copy()
            u[j] += sign * step_pu
            sol = solve_power_flow(
                net,
                add_setpoint_injections(base, net, devices, u),
                slack_v,
                x0=(ref.v_mag, ref.v_ang),
            )
            if not sol.converged:
                raise SensitivityError(
                    f"perturbed power flow diverged for column {label} "
                    f"({'+' if sign > 0 else '-'}{step_pu} p.u.)"
                )
            responses.append(sol)
        plus, minus = responses
        dv[:, j] = (plus.v_mag[rows] - minus.v_mag[rows]) / (2.0 * step_pu)
        dpcc[j] = (plus.pcc_power_pu - minus.pcc_power_pu) / (2.0 * step_pu)

    return SensitivityMatrix(
        dv=dv,
        dpcc=dpcc,
        monitored_buses=tuple(monitored),
        operating_point=u0.copy(),
        step_pu=step_pu,
    )
