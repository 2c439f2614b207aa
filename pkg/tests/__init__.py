# Test package

