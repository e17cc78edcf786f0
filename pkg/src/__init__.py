# Deformable Gaussian talking-head engine
