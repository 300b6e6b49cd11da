"""entroflow: tensor-diagram engine for higher-order entropy derivatives along probability flows.

The package generates the weighted tree forests encoding d^n/dt^n of a functional
along its own gradient flow, compiles each tree into a closed local integrand over
derivatives of the log-density, and evaluates everything by quadrature against
concrete densities on R^d (d <= 2).  Independent finite-difference and closed-form
oracles verify every identity at desk scale.
"""

from entroflow.bell import (
    BellPolynomial,
    PartitionVector,
    bell_apply,
    bell_coefficient,
    bell_polynomial,
)
