# Test package init