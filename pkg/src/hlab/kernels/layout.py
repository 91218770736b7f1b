"""Integer model codes and state-vector layout shared by both kernel backends.

Parameter vectors (``prm``) per model code:

* CONSTANT  ``[lam]``
* SAITO     ``[lam, r_moll, amp]``  with n = lam - amp * x1/|x|
* ANGULAR   ``[lam, r_moll, gamma, delta, K, c0, a_1..a_K, b_1..b_K]``
  with n = n_inf(theta) * (1 + gamma |x|^-delta)
* WAVEGUIDE ``[lam_w]`` with n = lam_w^2 Q(lam_w y)^2 + 1 - lam_w^2 / 2

Ray state columns: X1, X2, P1, P2, Phi, F, dX1/da, dX2/da, dP1/da, dP2/da.
"""

CONSTANT = 0
SAITO = 1
ANGULAR = 2
WAVEGUIDE = 3

NSTATE = 10
