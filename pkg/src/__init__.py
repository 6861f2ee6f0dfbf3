"""Cart-pendulum co-simulation toolkit: plant, linear model, PID controller and lockstep bridge"""
