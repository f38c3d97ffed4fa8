from setuptools import setup, find_packages

with open("README.md", "r") as readme_file: 
    readme = readme_file.read()

requirements = ["numpy>=1.22", "pandas>=1.5", "scipy>=1.8", "Shapely>=2.0", "matplotlib>=3.5", "svgwrite>=1.4", "tqdm>=4.60"]
    
setup(
    name="sketchDiffusion",
    description="A package for generating vector sketches with a stroke autoencoder and latent diffusion",
    long_description = readme,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    version="0.1",
    author="Gabriele Filomena",
    author_email="gabriele.filomena@uni-muenster.de",
    install_requires=requirements,
    python_requires=">=3.9",
    entry_points={"console_scripts": ["sketchDiffusion=sketchDiffusion.cli:main"]},
    keywords=["pip", "vector sketches", "latent diffusion", "variational autoencoder", "distance fields", "QuickDraw"],
    )
