"""Differentiable implicit-FEM simulation of thin shells and soft volumes.

The package is organized by concern:

* :mod:`shellsim.geometry` -- meshes, rest configuration, scene state
* :mod:`shellsim.energy` -- element potentials, gradients, Hessians, plasticity
* :mod:`shellsim.contact` -- broad phase, contact pairs, penalty + friction
* :mod:`shellsim.dynamics` -- implicit Euler stepping via Newton minimization
* :mod:`shellsim.adjoint` -- reverse-mode gradients through the time stepper
* :mod:`shellsim.tasks` -- benchmark manipulation and inverse-design tasks
* :mod:`shellsim.optimize` -- trajectory / parameter optimizers
* :mod:`shellsim.cli` -- command-line front end
"""

__version__ = "0.1.0"
