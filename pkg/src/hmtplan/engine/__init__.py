"""Backend planning passes: fusion, parallel scheduling, memory allocation, training memory."""
