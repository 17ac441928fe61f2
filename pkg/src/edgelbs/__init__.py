"""edgelbs: privacy-preserving location-service simulator.

Client-side k-anonymization and textbook-RSA crypto, two neural
evaluation models (NPE key-factor identification, POE next-POI scoring
with pre-trained embeddings), and threshold-gated edge-to-cloud query
routing, plus a metrics and experiment harness.
"""

__version__ = "0.1.0"
