"""
Servicios del dominio.
Este módulo contiene el modelo CA3Net y todo lo que lo entrena, guarda y evalúa.
"""
