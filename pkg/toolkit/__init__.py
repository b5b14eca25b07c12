# Copyright contributors to the Boltzmann mixtures project
#
