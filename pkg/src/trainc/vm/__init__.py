"""Bytecode VM, storage pool, kernel cache and the reference interpreter."""
