# -*- coding: utf-8 -*-
"""Image fidelity metrics, compression accounting and result reports."""
