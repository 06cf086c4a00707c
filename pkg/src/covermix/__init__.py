"""covermix: asymptotic decay expansions for lattice covers of mixing systems.

The package has three layers:

* exact calculus -- symmetric tensors (:mod:`covermix.symtensor`), Gaussian
  derivative kernels and lattice-sum lemmas (:mod:`covermix.gauss`);
* spectral machinery for finite models -- twisted transfer matrices and their
  perturbation jets (:mod:`covermix.markov`, :mod:`covermix.jets`), and the
  decay-coefficient engine (:mod:`covermix.expansion`);
* validation -- two independent correlation oracles (:mod:`covermix.markov`)
  and an event-driven planar Lorentz-gas simulator (:mod:`covermix.billiard`).

``covermix.cli`` ties these into a batch front-end; see README.md.
"""

__version__ = "0.1.0"

from . import symtensor  # noqa: F401
