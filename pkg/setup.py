"""Setup script for the package."""

from setuptools import setup, find_packages

setup(
    name="expressnet_moe",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    entry_points={"console_scripts": ["xnmoe=main:main"]},
    py_modules=["main"],
    install_requires=[
        "hydra-core>=1.3.0",
        "omegaconf>=2.3.0",
        "numpy>=1.25.0",
        "torch>=2.4.0",
        "pandas>=2.0.0",
        "scikit-learn>=1.4.0",
        "Pillow>=9.5.0",
        "matplotlib>=3.8.0",
        "seaborn>=0.13.0",
    ],
)
