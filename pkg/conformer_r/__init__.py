"""
Conformer-R - desk-scale Conformer encoder, R-Drop regularized CTC/AED training and scoring kit.
"""
