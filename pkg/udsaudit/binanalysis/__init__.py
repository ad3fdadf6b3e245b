"""Daemon binary analysis: ELF loading, CFG recovery and argument dataflow."""
