"""Test suite for SD Image Recovery Tool."""
