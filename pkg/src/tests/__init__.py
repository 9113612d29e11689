"""
phaseprof - Test Suite

This package contains all tests for phaseprof:
- Unit tests for the tensor engine, containers and services
- End-to-end tests for the command line
- Invariant tests for critical system properties
"""
