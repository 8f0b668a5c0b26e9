"""Resistive crossbar models: mapping, nodal IR-drop solver and cost model."""
