# -*- coding: utf-8 -*-
"""Fake quantization primitives and the low-rank finetuning quantizer."""
