"""SPECTRE modules"""
