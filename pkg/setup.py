from setuptools import find_packages, setup

setup(
    name="pybinflow",
    version='v0.1.0',
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={"binflow.utils": ["isa_profiles.yaml"]},
    install_requires=[
        "loguru>=0.7.3,<1.0.0",
        "python-dotenv>=1.1.0,<2.0.0",
        "pandas>=2.2.3,<3.0.0",
        "numpy>=2.2.6,<3.0.0",
        "scipy>=1.13.0,<2.0.0",
        "scikit-learn>=1.5.0,<2.0.0",
        "sacrebleu>=2.4.0,<3.0.0",
        "tqdm>=4.67.1,<5.0.0",
        "pydantic>=2.11.5,<3.0.0",
        "pydantic-settings>=2.9.1,<3.0.0",
        "PyYAML>=6.0.2,<7.0.0",
        "chardet>=5.2.0,<6.0.0",
        "tabulate>=0.9.0,<1.0.0",
        "setuptools"
    ],
    extras_require={"test": ["pytest>=8.0.0", "pytest-cov>=5.0.0"]},
    entry_points={
        "console_scripts": [
            "binflow=binflow.cli:main",
            "binflow-ablate=binflow.evaluation.ablation:main",
        ]
    },
    description="Unsupervised binary code translation across instruction set architectures with flow adapters.",
    long_description=open("README.md", encoding="utf-8").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
)
