"""Leakage laboratory for a constant-time CDT Gaussian sampler.

The sampler used during lattice key generation writes one mask word per
table-scan iteration, and that word is always all zeros or all ones. This
package simulates the resulting Hamming-weight leakage, localizes it with
correlation analysis, classifies it with Gaussian templates, and folds
the classified bits back into the secret key, one trace per coefficient.
"""

__version__ = "0.1.0"
