"""
Literal residual on a single encoding
=====================================

The head turns a token sequence into a sparse vector over the vocabulary.
Terms that literally occur in the input get lifted by the gap between the
largest residual score and their own, so a literal term the encoder scored
weakly is not lost.
"""

import numpy as np

from litsparse.encoder import init_params
from litsparse.head import encode, literal_indicator

np.set_printoptions(precision=3, suppress=True)

# a tiny random model: 10 vocabulary terms, 4 hidden units
params = init_params(10, 4, seed=42)
params.lrn_b[:] = np.random.default_rng(0).normal(size=10)
tokens = [3, 7]

out = encode(params, tokens, mode="prosper")
basic = out.basic.to_dense(10)
final = out.final.to_dense(10)
print("basic weights      ", basic)
print("residual scores w' ", out.enhancement)
print("final weights      ", final)

# only literal terms move, and by exactly max(w') - w'_j
lit = literal_indicator(tokens, 10)
print("literal terms      ", lit)
print("lift on literals   ", (final - basic)[lit])
print("max(w') - w'       ", (out.enhancement.max() - out.enhancement)[lit])

# without the residual the literal terms keep their basic weight
plain = encode(params, tokens, mode="no_lrn").final.to_dense(10)
assert np.array_equal(plain, basic)
