"""Fair ventilator allocation with a transformer double-DQN."""
