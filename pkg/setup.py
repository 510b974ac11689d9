from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="milforge",
    version="0.1.0",
    description="Attention-based multiple instance learning for whole slide images",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=["src"],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Environment :: Console",
    ],
    python_requires=">=3.11",
    install_requires=requirements,
    extras_require={
        "slides": [
            "openslide-python>=1.2.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "milforge=src.milforge_cli:main",
        ],
    },
    keywords="multiple instance learning attention pathology whole slide image",
)
