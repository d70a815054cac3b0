# -*- coding: utf-8 -*-
"""The three-stage quantization procedure and its losses."""
