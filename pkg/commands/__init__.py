# Commands package for SAT-NGP
