# Services package: patterns, nets, metric, scan engine, detection, simulation, tensor I/O
