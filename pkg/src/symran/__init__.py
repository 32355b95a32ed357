"""symran: symbolic distillation of RAN control policies.

Pipeline: seeded slicing/handover simulators -> black-box teacher traces
-> concept layer -> symbolic students (expression trees / rule tables)
-> two-stage action shield -> evaluation harness.
"""

__version__ = "0.1.0"
