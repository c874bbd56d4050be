#!/usr/bin/env python
# -*- coding: utf-8 -*-


from setuptools import setup, find_packages


version = '0.1.0'

setup(
    name='kpldf',
    version=version,
    packages=find_packages(exclude=['tests']),
    scripts=['cli/kpldf_cli'],
    install_requires=['numpy>=1.17', 'cryptography>=2.1.1'],
    extras_require={'test': ['pytest>=6.0', 'hypothesis>=5.0']},
    description='Knapsack approximation with Lagrangian dual training',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
    ],
    include_package_data=True,
    zip_safe=False,
)
