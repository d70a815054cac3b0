# -*- coding: utf-8 -*-
"""Noise schedule and the toy one-step super-resolution network."""
