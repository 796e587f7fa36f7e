# Utils package for SAT-NGP