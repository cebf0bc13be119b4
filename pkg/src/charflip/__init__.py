"""Character-flip adversarial attack toolkit.

Train a small toxicity classifier, attack it with gradient-guided
character-flip searches, distill those attacks into a fast learned
attacker, and measure attack quality and black-box transfer.
"""

__version__ = "0.1.0"
