"""A setuptools based setup module.

See:
https://packaging.python.org/en/latest/distributing.html
https://github.com/pypa/sampleproject
"""

# Always prefer setuptools over distutils
from setuptools import setup, find_packages
# To use a consistent encoding
from codecs import open
from os import path

here = path.abspath(path.dirname(__file__))

# Get the long description from the README file
with open(path.join(here, 'README.md'), encoding='utf-8') as f:
    readmefile_contents = f.read()

setup(
    name='platenet',
    version='1.0',
    description='Number plate detection and classification with a from-scratch numpy CNN engine',
    long_description=readmefile_contents,
    long_description_content_type='text/markdown',

    license='MIT',
    classifiers=[
        'Development Status :: 3 - Alpha',

        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Image Recognition',

        'License :: OSI Approved :: MIT License',

        'Programming Language :: Python :: 3',
    ],

    packages=find_packages(exclude=['tests']),
    package_data={
        'platenet': ['*.yaml', 'schemas/*.yaml'],
        'platenet_format': ['schemas/*.yaml', 'templates/*'],
    },
    python_requires='>=3.8',
    install_requires=[
        'numpy >= 1.20',      # Tensors and all numerics, sliding_window_view needs 1.20
        'Pillow >= 9.1',      # Draw synthetic scenes, read and write images, letterbox resampling
        'PyYAML ~= 6.0',       # Parse configuration files
        'Jinja2 ~= 3.1.1',       # Render report tables and PR curve plots with templates
        'hypothesis ~= 6.43.1',   # Generics for UnitTests
        'jsonschema ~= 4.4.0',    # Validators for JSON schemas
        'python_jsonschema_objects ~= 0.4.1', # JSON schema to Python object mappings
    ],
    entry_points={
        'console_scripts': [
            'platenet = platenet.main:cli_main',
        ],
    },
)
