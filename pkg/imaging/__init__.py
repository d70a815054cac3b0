# -*- coding: utf-8 -*-
"""Image files, degradation and the paired LR/HR calibration set."""
