# Services package for SAT-NGP
import os

# Invariant assertions on composites and solar losses (tests switch this on)
DEBUG_CHECKS = os.getenv("SATNGP_DEBUG", "0") == "1"
